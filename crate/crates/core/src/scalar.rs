//! Scalar element types shared by tensors, distribution matrices and the toy model.

use std::fmt::{self, Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::tensor::TensorData;

/// Storage dtype tag as it appears in a container header.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn size_in_bytes(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DType::F32 => "F32",
            DType::F64 => "F64",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "F32" => Some(DType::F32),
            "F64" => Some(DType::F64),
            _ => None,
        }
    }
}

impl std::str::FromStr for DType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        DType::parse(&s.to_ascii_uppercase()).ok_or_else(|| format!("unknown dtype `{s}`"))
    }
}

impl Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A floating point element that can be stored in a [`Tensor`](crate::Tensor).
///
/// All statistics are accumulated in `f64` regardless of the storage type, so
/// implementors only need lossless widening and rounding narrowing.
pub trait Element:
    Float + FromPrimitive + ToPrimitive + Debug + Default + Send + Sync + 'static
{
    const DTYPE: DType;
    /// Tolerance used when checking that a row of probabilities sums to one.
    const ROW_SUM_TOL: f64;

    fn widen(self) -> f64;
    fn narrow(v: f64) -> Self;

    fn wrap(data: Vec<Self>) -> TensorData;
    fn view(data: &TensorData) -> Option<&[Self]>;

    fn write_le(self, out: &mut Vec<u8>);
    /// `bytes` must hold exactly `DTYPE.size_in_bytes()` bytes.
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: DType = DType::F32;
    const ROW_SUM_TOL: f64 = 1e-5;

    fn widen(self) -> f64 {
        self as f64
    }

    fn narrow(v: f64) -> Self {
        v as f32
    }

    fn wrap(data: Vec<Self>) -> TensorData {
        TensorData::F32(data)
    }

    fn view(data: &TensorData) -> Option<&[Self]> {
        match data {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte chunk"))
    }
}

impl Element for f64 {
    const DTYPE: DType = DType::F64;
    const ROW_SUM_TOL: f64 = 1e-9;

    fn widen(self) -> f64 {
        self
    }

    fn narrow(v: f64) -> Self {
        v
    }

    fn wrap(data: Vec<Self>) -> TensorData {
        TensorData::F64(data)
    }

    fn view(data: &TensorData) -> Option<&[Self]> {
        match data {
            TensorData::F64(v) => Some(v),
            _ => None,
        }
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8-byte chunk"))
    }
}

/// Runs `$body` with `$T` bound to the Rust type matching a runtime [`DType`].
#[macro_export]
macro_rules! with_dtype {
    ($dtype:expr, $T:ident => $body:expr) => {
        match $dtype {
            $crate::DType::F32 => {
                type $T = f32;
                $body
            }
            $crate::DType::F64 => {
                type $T = f64;
                $body
            }
        }
    };
}
