//! Latent tensors, adapter/condition handles and the CDST tensor codec.
//!
//! Tensors are dense, row-major `C x H x W` arrays of `f32` with the channel
//! axis outermost. Every constructed tensor holds only finite values.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// File magic for the CDST tensor format.
pub const CDST_MAGIC: [u8; 4] = *b"CDST";
/// Supported CDST format version.
pub const CDST_VERSION: u32 = 1;
const CDST_RANK: u32 = 3;
const CDST_HEADER_LEN: usize = 4 + 4 * 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("invalid shape {0}: every dimension must be at least 1")]
    InvalidShape(Shape),
    #[error("value count {actual} does not match shape {shape} ({expected} values)")]
    LengthMismatch {
        shape: Shape,
        expected: usize,
        actual: usize,
    },
    #[error("shape mismatch: {left} vs {right}")]
    ShapeMismatch { left: Shape, right: Shape },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
    #[error("bad magic bytes {0:?}, expected \"CDST\"")]
    BadMagic([u8; 4]),
    #[error("unsupported CDST version {0}, expected {CDST_VERSION}")]
    UnsupportedVersion(u32),
    #[error("unsupported rank {0}, expected 3")]
    UnsupportedRank(u32),
    #[error("truncated CDST payload: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("{0} trailing bytes after CDST payload")]
    TrailingBytes(usize),
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
}

/// Tensor geometry: channel count, height and width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Result<Self, TensorError> {
        let shape = Self {
            channels,
            height,
            width,
        };
        if channels == 0 || height == 0 || width == 0 {
            return Err(TensorError::InvalidShape(shape));
        }
        Ok(shape)
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of spatial locations (`H * W`).
    pub fn plane(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn index(&self, c: usize, h: usize, w: usize) -> usize {
        (c * self.height + h) * self.width + w
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// A finite-valued `C x H x W` latent array.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    shape: Shape,
    data: Vec<f32>,
}

impl LatentTensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self, TensorError> {
        let shape = Shape::new(shape.channels, shape.height, shape.width)?;
        if data.len() != shape.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected: shape.len(),
                actual: data.len(),
            });
        }
        check_finite(&data)?;
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::filled(shape, 0.0)
    }

    /// # Panics
    /// If `value` is not finite.
    pub fn filled(shape: Shape, value: f32) -> Self {
        assert!(value.is_finite(), "fill value must be finite");
        Self {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_fn(
        shape: Shape,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Result<Self, TensorError> {
        let mut data = Vec::with_capacity(shape.len());
        for c in 0..shape.channels {
            for h in 0..shape.height {
                for w in 0..shape.width {
                    data.push(f(c, h, w));
                }
            }
        }
        Self::new(shape, data)
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn get(&self, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.shape.index(c, h, w)]
    }

    pub fn ensure_same_shape(&self, other: &LatentTensor) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::ShapeMismatch {
                left: self.shape,
                right: other.shape,
            });
        }
        Ok(())
    }

    /// Combines two same-shape tensors elementwise; the result is checked for finiteness.
    pub fn zip_map(
        &self,
        other: &LatentTensor,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<LatentTensor, TensorError> {
        self.ensure_same_shape(other)?;
        let data: Vec<f32> = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        check_finite(&data)?;
        Ok(LatentTensor {
            shape: self.shape,
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<LatentTensor, TensorError> {
        let data: Vec<f32> = self.data.iter().map(|&a| f(a)).collect();
        check_finite(&data)?;
        Ok(LatentTensor {
            shape: self.shape,
            data,
        })
    }

    pub fn add(&self, other: &LatentTensor) -> Result<LatentTensor, TensorError> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &LatentTensor) -> Result<LatentTensor, TensorError> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn hadamard(&self, other: &LatentTensor) -> Result<LatentTensor, TensorError> {
        self.zip_map(other, |a, b| a * b)
    }

    pub fn scale(&self, factor: f32) -> Result<LatentTensor, TensorError> {
        self.map(|a| a * factor)
    }

    pub fn neg(&self) -> LatentTensor {
        LatentTensor {
            shape: self.shape,
            data: self.data.iter().map(|a| -a).collect(),
        }
    }

    /// Euclidean norm over all values, accumulated in `f64`.
    pub fn norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    pub fn distance(&self, other: &LatentTensor) -> Result<f64, TensorError> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| {
                let d = f64::from(a) - f64::from(b);
                d * d
            })
            .sum::<f64>()
            .sqrt())
    }

    /// Encodes the tensor as a CDST byte buffer.
    pub fn to_cdst_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(CDST_HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(&CDST_MAGIC);
        for word in [
            CDST_VERSION,
            CDST_RANK,
            self.shape.channels as u32,
            self.shape.height as u32,
            self.shape.width as u32,
        ] {
            out.extend_from_slice(&word.to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    /// Decodes a CDST byte buffer.
    pub fn from_cdst_bytes(bytes: &[u8]) -> Result<Self, TensorError> {
        if bytes.len() < CDST_HEADER_LEN {
            if bytes.len() >= 4 && bytes[..4] != CDST_MAGIC {
                return Err(TensorError::BadMagic(bytes[..4].try_into().unwrap()));
            }
            return Err(TensorError::Truncated {
                expected: CDST_HEADER_LEN,
                actual: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[..4].try_into().unwrap();
        if magic != CDST_MAGIC {
            return Err(TensorError::BadMagic(magic));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != CDST_VERSION {
            return Err(TensorError::UnsupportedVersion(version));
        }
        let rank = word(1);
        if rank != CDST_RANK {
            return Err(TensorError::UnsupportedRank(rank));
        }
        let shape = Shape::new(word(2) as usize, word(3) as usize, word(4) as usize)?;
        let payload = &bytes[CDST_HEADER_LEN..];
        let expected = shape
            .channels
            .checked_mul(shape.height)
            .and_then(|n| n.checked_mul(shape.width))
            .and_then(|n| n.checked_mul(4))
            .unwrap_or(usize::MAX);
        if payload.len() < expected {
            return Err(TensorError::Truncated {
                expected: CDST_HEADER_LEN.saturating_add(expected),
                actual: bytes.len(),
            });
        }
        if payload.len() > expected {
            return Err(TensorError::TrailingBytes(payload.len() - expected));
        }
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(shape, data)
    }

    pub fn read_cdst(path: impl AsRef<Path>) -> Result<Self, TensorError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| io_error(path, e))?;
        Self::from_cdst_bytes(&bytes)
    }

    pub fn write_cdst(&self, path: impl AsRef<Path>) -> Result<(), TensorError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_cdst_bytes()).map_err(|e| io_error(path, e))
    }
}

fn io_error(path: &Path, e: std::io::Error) -> TensorError {
    TensorError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn check_finite(data: &[f32]) -> Result<(), TensorError> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(TensorError::NonFinite { index }),
        None => Ok(()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    /// Multiplication by a scalar (or, with a tensor operand, the same as `Hadamard`).
    Scale,
    Hadamard,
}

/// Right-hand operand of [`elementwise`]; scalars broadcast over every element.
#[derive(Debug, Clone, Copy)]
pub enum Operand<'a> {
    Tensor(&'a LatentTensor),
    Scalar(f32),
}

pub fn elementwise(
    op: ElementwiseOp,
    a: &LatentTensor,
    b: Operand<'_>,
) -> Result<LatentTensor, TensorError> {
    let f = match op {
        ElementwiseOp::Add => |x: f32, y: f32| x + y,
        ElementwiseOp::Sub => |x: f32, y: f32| x - y,
        ElementwiseOp::Scale | ElementwiseOp::Hadamard => |x: f32, y: f32| x * y,
    };
    match b {
        Operand::Tensor(t) => a.zip_map(t, f),
        Operand::Scalar(s) => a.map(|x| f(x, s)),
    }
}

/// Names a prompt condition registered at a predictor backend.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ConditionRef(String);

impl ConditionRef {
    pub fn new(id: impl Into<String>) -> Result<Self, HandleError> {
        let id = id.into();
        if id.is_empty() {
            return Err(HandleError::EmptyId("condition"));
        }
        Ok(Self(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for ConditionRef {
    type Error = HandleError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        Self::new(s)
    }
}

impl From<ConditionRef> for String {
    fn from(c: ConditionRef) -> String {
        c.0
    }
}

impl fmt::Display for ConditionRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HandleError {
    #[error("{0} id must be non-empty")]
    EmptyId(&'static str),
    #[error("adapter scale {0} outside [0, 2]")]
    ScaleOutOfRange(f64),
}

/// A concept adapter together with the scale it is applied at.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawAdapterSpec")]
pub struct AdapterSpec {
    pub id: String,
    pub scale: f64,
}

#[derive(Deserialize)]
struct RawAdapterSpec {
    id: String,
    #[serde(default = "default_adapter_scale")]
    scale: f64,
}

fn default_adapter_scale() -> f64 {
    0.8
}

impl TryFrom<RawAdapterSpec> for AdapterSpec {
    type Error = HandleError;
    fn try_from(raw: RawAdapterSpec) -> Result<Self, Self::Error> {
        Self::new(raw.id, raw.scale)
    }
}

impl AdapterSpec {
    pub fn new(id: impl Into<String>, scale: f64) -> Result<Self, HandleError> {
        let id = id.into();
        if id.is_empty() {
            return Err(HandleError::EmptyId("adapter"));
        }
        if !scale.is_finite() || !(0.0..=2.0).contains(&scale) {
            return Err(HandleError::ScaleOutOfRange(scale));
        }
        Ok(Self { id, scale })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn shape(c: usize, h: usize, w: usize) -> Shape {
        Shape::new(c, h, w).unwrap()
    }

    #[test]
    fn smallest_tensor_decodes() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"CDST");
        for w in [1u32, 3, 1, 1, 1] {
            bytes.extend_from_slice(&w.to_le_bytes());
        }
        bytes.extend_from_slice(&0.0f32.to_le_bytes());
        let t = LatentTensor::from_cdst_bytes(&bytes).unwrap();
        assert_eq!(t.shape(), shape(1, 1, 1));
        assert_eq!(t.as_slice(), &[0.0]);
        assert_eq!(t.to_cdst_bytes(), bytes);
    }

    #[test]
    fn header_layout_is_little_endian() {
        let t = LatentTensor::new(shape(2, 1, 3), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = t.to_cdst_bytes();
        assert_eq!(&b[..4], b"CDST");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(&b[8..12], &[3, 0, 0, 0]);
        assert_eq!(&b[12..16], &[2, 0, 0, 0]);
        assert_eq!(&b[16..20], &[1, 0, 0, 0]);
        assert_eq!(&b[20..24], &[3, 0, 0, 0]);
        assert_eq!(&b[24..28], &1.0f32.to_le_bytes());
        assert_eq!(b.len(), 24 + 6 * 4);
    }

    #[test]
    fn decode_errors_are_distinct() {
        let good = LatentTensor::filled(shape(1, 2, 2), 1.5).to_cdst_bytes();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(
            LatentTensor::from_cdst_bytes(&bad),
            Err(TensorError::BadMagic(_))
        ));

        let mut bad = good.clone();
        bad[4] = 2;
        assert_eq!(
            LatentTensor::from_cdst_bytes(&bad),
            Err(TensorError::UnsupportedVersion(2))
        );

        let mut bad = good.clone();
        bad[8] = 4;
        assert_eq!(
            LatentTensor::from_cdst_bytes(&bad),
            Err(TensorError::UnsupportedRank(4))
        );

        let short = &good[..good.len() - 4];
        assert!(matches!(
            LatentTensor::from_cdst_bytes(short),
            Err(TensorError::Truncated { .. })
        ));
        assert!(matches!(
            LatentTensor::from_cdst_bytes(&good[..10]),
            Err(TensorError::Truncated { .. })
        ));

        let mut long = good.clone();
        long.extend_from_slice(&[0, 0]);
        assert_eq!(
            LatentTensor::from_cdst_bytes(&long),
            Err(TensorError::TrailingBytes(2))
        );

        let mut nan = good.clone();
        let n = nan.len();
        nan[n - 4..].copy_from_slice(&f32::NAN.to_le_bytes());
        assert_eq!(
            LatentTensor::from_cdst_bytes(&nan),
            Err(TensorError::NonFinite { index: 3 })
        );

        let mut zero_dim = good;
        zero_dim[16..20].copy_from_slice(&0u32.to_le_bytes());
        assert!(matches!(
            LatentTensor::from_cdst_bytes(&zero_dim),
            Err(TensorError::InvalidShape(_))
        ));
    }

    #[test]
    fn construction_rejects_non_finite_and_bad_length() {
        assert!(matches!(
            LatentTensor::new(shape(1, 1, 2), vec![1.0]),
            Err(TensorError::LengthMismatch { .. })
        ));
        assert_eq!(
            LatentTensor::new(shape(1, 1, 2), vec![1.0, f32::INFINITY]),
            Err(TensorError::NonFinite { index: 1 })
        );
        assert!(Shape::new(0, 1, 1).is_err());
    }

    #[test]
    fn elementwise_examples() {
        let x = LatentTensor::new(shape(1, 1, 2), vec![2.0, 3.0]).unwrap();
        let y = LatentTensor::new(shape(1, 1, 2), vec![4.0, 5.0]).unwrap();
        let ones = LatentTensor::filled(x.shape(), 1.0);

        let h = elementwise(ElementwiseOp::Hadamard, &x, Operand::Tensor(&y)).unwrap();
        assert_eq!(h.as_slice(), &[8.0, 15.0]);
        assert_eq!(
            elementwise(ElementwiseOp::Hadamard, &x, Operand::Tensor(&ones)).unwrap(),
            x
        );
        let z = elementwise(ElementwiseOp::Add, &x, Operand::Tensor(&x.neg())).unwrap();
        assert_eq!(z, LatentTensor::zeros(x.shape()));
        let s = elementwise(ElementwiseOp::Scale, &x, Operand::Scalar(0.5)).unwrap();
        assert_eq!(s.as_slice(), &[1.0, 1.5]);
        let d = elementwise(ElementwiseOp::Sub, &x, Operand::Scalar(1.0)).unwrap();
        assert_eq!(d.as_slice(), &[1.0, 2.0]);

        let other = LatentTensor::zeros(shape(1, 2, 1));
        assert!(matches!(
            elementwise(ElementwiseOp::Add, &x, Operand::Tensor(&other)),
            Err(TensorError::ShapeMismatch { .. })
        ));
        assert!(matches!(
            x.scale(f32::MAX).and_then(|t| t.scale(10.0)),
            Err(TensorError::NonFinite { .. })
        ));
    }

    #[test]
    fn handles_validate() {
        assert!(ConditionRef::new("").is_err());
        assert!(AdapterSpec::new("", 0.8).is_err());
        assert!(AdapterSpec::new("a", 2.5).is_err());
        assert!(AdapterSpec::new("a", f64::NAN).is_err());
        let a: AdapterSpec = serde_json::from_str(r#"{"id":"style"}"#).unwrap();
        assert_eq!(a.scale, 0.8);
        assert!(serde_json::from_str::<AdapterSpec>(r#"{"id":"s","scale":3}"#).is_err());
        assert!(serde_json::from_str::<ConditionRef>(r#""""#).is_err());
    }

    fn arb_tensor() -> impl Strategy<Value = LatentTensor> {
        (1usize..4, 1usize..6, 1usize..6).prop_flat_map(|(c, h, w)| {
            proptest::collection::vec(
                proptest::num::f32::NORMAL | proptest::num::f32::SUBNORMAL | proptest::num::f32::ZERO,
                c * h * w,
            )
            .prop_map(move |v| LatentTensor::new(Shape::new(c, h, w).unwrap(), v).unwrap())
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn cdst_round_trip_is_bitwise(t in arb_tensor()) {
            let back = LatentTensor::from_cdst_bytes(&t.to_cdst_bytes()).unwrap();
            let a: Vec<u32> = t.as_slice().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = back.as_slice().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!(t.shape(), back.shape());
        }

        #[test]
        fn add_and_hadamard_commute(
            a in proptest::collection::vec(-1e3f32..1e3, 12),
            b in proptest::collection::vec(-1e3f32..1e3, 12),
            k in -10f32..10.0,
        ) {
            let s = Shape::new(3, 2, 2).unwrap();
            let x = LatentTensor::new(s, a).unwrap();
            let y = LatentTensor::new(s, b).unwrap();
            prop_assert_eq!(x.add(&y).unwrap(), y.add(&x).unwrap());
            prop_assert_eq!(x.hadamard(&y).unwrap(), y.hadamard(&x).unwrap());
            let lhs = x.add(&y).unwrap().scale(k).unwrap();
            let rhs = x.scale(k).unwrap().add(&y.scale(k).unwrap()).unwrap();
            // Rounding error scales with the operands, not with a cancelled sum.
            for (i, (l, r)) in lhs.as_slice().iter().zip(rhs.as_slice()).enumerate() {
                let scale = k.abs() * (x.as_slice()[i].abs() + y.as_slice()[i].abs());
                prop_assert!((l - r).abs() <= 4.0 * f32::EPSILON * scale + f32::MIN_POSITIVE);
            }
        }
    }
}
