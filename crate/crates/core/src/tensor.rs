//! Element types, graph-time shapes and runtime tensor values.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::summaries::SummaryValue;

/// Element type carried by a tensor edge.
///
/// `Summary` is the payload type of summary operations; it never takes part
/// in arithmetic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    Summary,
}

impl DType {
    /// Bytes per element; summary records are sized by their encoded payload instead.
    pub fn size_of(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::Summary => 0,
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, DType::F32 | DType::F64)
    }

    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::Summary => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<DType> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            2 => Some(DType::Summary),
            _ => None,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DType::F32 => f.write_str("f32"),
            DType::F64 => f.write_str("f64"),
            DType::Summary => f.write_str("summary"),
        }
    }
}

/// One graph-time extent. `Dynamic` serializes as JSON `null`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Dim {
    Known(usize),
    Dynamic,
}

impl Dim {
    pub fn known(self) -> Option<usize> {
        match self {
            Dim::Known(n) => Some(n),
            Dim::Dynamic => None,
        }
    }

    /// Two extents are compatible when either is dynamic or both agree.
    pub fn compatible(self, other: Dim) -> bool {
        match (self, other) {
            (Dim::Known(a), Dim::Known(b)) => a == b,
            _ => true,
        }
    }

    /// The more specific of two compatible extents.
    pub fn merge(self, other: Dim) -> Dim {
        match (self, other) {
            (Dim::Known(a), _) => Dim::Known(a),
            (Dim::Dynamic, b) => b,
        }
    }
}

impl Serialize for Dim {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Dim::Known(n) => s.serialize_u64(*n as u64),
            Dim::Dynamic => s.serialize_none(),
        }
    }
}

impl<'de> Deserialize<'de> for Dim {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Ok(match Option::<u64>::deserialize(d)? {
            Some(n) => Dim::Known(n as usize),
            None => Dim::Dynamic,
        })
    }
}

impl fmt::Display for Dim {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dim::Known(n) => write!(f, "{n}"),
            Dim::Dynamic => f.write_str("?"),
        }
    }
}

/// Graph-time shape; rank 0 is a scalar.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct Shape(pub Vec<Dim>);

impl Shape {
    pub fn scalar() -> Shape {
        Shape(Vec::new())
    }

    pub fn known(dims: &[usize]) -> Shape {
        Shape(dims.iter().map(|&d| Dim::Known(d)).collect())
    }

    /// Builds a shape from optional extents, `None` meaning dynamic.
    pub fn from_opt(dims: &[Option<usize>]) -> Shape {
        Shape(dims.iter().map(|d| d.map_or(Dim::Dynamic, Dim::Known)).collect())
    }

    pub fn rank(&self) -> usize {
        self.0.len()
    }

    pub fn dims(&self) -> &[Dim] {
        &self.0
    }

    pub fn is_concrete(&self) -> bool {
        self.0.iter().all(|d| matches!(d, Dim::Known(_)))
    }

    pub fn to_concrete(&self) -> Option<Vec<usize>> {
        self.0.iter().map(|d| d.known()).collect()
    }

    /// Whether runtime extents `dims` can inhabit this shape.
    pub fn accepts(&self, dims: &[usize]) -> bool {
        self.rank() == dims.len() && self.0.iter().zip(dims).all(|(d, &n)| d.compatible(Dim::Known(n)))
    }

    pub fn compatible(&self, other: &Shape) -> bool {
        self.rank() == other.rank() && self.0.iter().zip(&other.0).all(|(a, b)| a.compatible(*b))
    }

    pub fn merge(&self, other: &Shape) -> Shape {
        Shape(self.0.iter().zip(&other.0).map(|(a, b)| a.merge(*b)).collect())
    }

    /// Element count with dynamic extents replaced by `hint`.
    pub fn element_count_hint(&self, hint: usize) -> usize {
        self.0.iter().map(|d| d.known().unwrap_or(hint)).product()
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("(")?;
        for (i, d) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{d}")?;
        }
        f.write_str(")")
    }
}

/// Dense row-major element storage.
#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    Summary(Vec<SummaryValue>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::Summary(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::Summary(_) => DType::Summary,
        }
    }
}

/// A concrete runtime tensor: fully known extents plus a matching buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorValue {
    dims: Vec<usize>,
    data: TensorData,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("buffer of {len} elements does not fill dims {dims:?}")]
pub struct ElementCountError {
    pub dims: Vec<usize>,
    pub len: usize,
}

impl TensorValue {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self, ElementCountError> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(ElementCountError { dims, len: data.len() });
        }
        Ok(TensorValue { dims, data })
    }

    pub fn from_f32(dims: &[usize], data: Vec<f32>) -> Result<Self, ElementCountError> {
        Self::new(dims.to_vec(), TensorData::F32(data))
    }

    pub fn from_f64(dims: &[usize], data: Vec<f64>) -> Result<Self, ElementCountError> {
        Self::new(dims.to_vec(), TensorData::F64(data))
    }

    /// Builds a float tensor of `dtype` from f64 values, rounding for F32.
    pub fn from_values(dtype: DType, dims: &[usize], values: &[f64]) -> Result<Self, ElementCountError> {
        let data = match dtype {
            DType::F32 => TensorData::F32(values.iter().map(|&v| v as f32).collect()),
            DType::F64 => TensorData::F64(values.to_vec()),
            DType::Summary => panic!("summary tensors cannot be built from numbers"),
        };
        Self::new(dims.to_vec(), data)
    }

    pub fn scalar(dtype: DType, value: f64) -> Self {
        Self::filled(dtype, &[], value)
    }

    pub fn filled(dtype: DType, dims: &[usize], value: f64) -> Self {
        let n = dims.iter().product();
        let data = match dtype {
            DType::F32 => TensorData::F32(vec![value as f32; n]),
            DType::F64 => TensorData::F64(vec![value; n]),
            DType::Summary => TensorData::Summary(Vec::new()),
        };
        TensorValue {
            dims: dims.to_vec(),
            data,
        }
    }

    pub fn zeros(dtype: DType, dims: &[usize]) -> Self {
        Self::filled(dtype, dims, 0.0)
    }

    pub fn summaries(values: Vec<SummaryValue>) -> Self {
        TensorValue {
            dims: vec![values.len()],
            data: TensorData::Summary(values),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn into_data(self) -> TensorData {
        self.data
    }

    pub fn element_count(&self) -> usize {
        self.data.len()
    }

    /// Buffer size used for live-memory accounting and transfer estimates.
    pub fn size_bytes(&self) -> usize {
        match &self.data {
            TensorData::Summary(v) => v.iter().map(SummaryValue::encoded_len).sum(),
            d => d.len() * d.dtype().size_of(),
        }
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<&[f64]> {
        match &self.data {
            TensorData::F64(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_summaries(&self) -> Option<&[SummaryValue]> {
        match &self.data {
            TensorData::Summary(v) => Some(v),
            _ => None,
        }
    }

    /// Elements widened to f64. Empty for summary tensors.
    pub fn to_f64_vec(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::Summary(_) => Vec::new(),
        }
    }

    /// First element widened to f64, for scalars.
    pub fn scalar_value(&self) -> Option<f64> {
        match &self.data {
            TensorData::F32(v) => v.first().map(|&x| x as f64),
            TensorData::F64(v) => v.first().copied(),
            TensorData::Summary(_) => None,
        }
    }

    pub fn with_dims(mut self, dims: Vec<usize>) -> Result<Self, ElementCountError> {
        if dims.iter().product::<usize>() != self.data.len() {
            return Err(ElementCountError {
                dims,
                len: self.data.len(),
            });
        }
        self.dims = dims;
        Ok(self)
    }

    /// Same dtype, same dims, same bit patterns.
    pub fn bit_eq(&self, other: &TensorValue) -> bool {
        if self.dims != other.dims {
            return false;
        }
        match (&self.data, &other.data) {
            (TensorData::F32(a), TensorData::F32(b)) => a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
            (TensorData::F64(a), TensorData::F64(b)) => a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()),
            (TensorData::Summary(a), TensorData::Summary(b)) => a == b,
            _ => false,
        }
    }
}

/// JSON form used inside graph attributes. Non-finite elements are written
/// as the strings `"NaN"`, `"Infinity"` and `"-Infinity"`.
#[derive(Serialize, Deserialize)]
struct TensorRepr {
    dtype: DType,
    dims: Vec<usize>,
    data: Vec<serde_json::Value>,
}

fn encode_number(v: f64, dtype: DType) -> serde_json::Value {
    if v.is_nan() {
        "NaN".into()
    } else if v == f64::INFINITY {
        "Infinity".into()
    } else if v == f64::NEG_INFINITY {
        "-Infinity".into()
    } else if dtype == DType::F32 {
        // shortest f32 text, unless double rounding through f64 would change the bits
        let x = v as f32;
        let short = x.to_string().parse::<f64>().unwrap_or(v);
        let chosen = if (short as f32).to_bits() == x.to_bits() {
            short
        } else {
            x as f64
        };
        serde_json::Value::Number(serde_json::Number::from_f64(chosen).expect("finite"))
    } else {
        serde_json::Value::Number(serde_json::Number::from_f64(v).expect("finite"))
    }
}

fn decode_number(v: &serde_json::Value) -> Result<f64, String> {
    match v {
        serde_json::Value::Number(n) => n.as_f64().ok_or_else(|| format!("bad number {n}")),
        serde_json::Value::String(s) => match s.as_str() {
            "NaN" => Ok(f64::NAN),
            "Infinity" => Ok(f64::INFINITY),
            "-Infinity" => Ok(f64::NEG_INFINITY),
            other => Err(format!("bad number string {other:?}")),
        },
        other => Err(format!("expected number, got {other}")),
    }
}

impl Serialize for TensorValue {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::Error;
        let dtype = self.dtype();
        if dtype == DType::Summary {
            return Err(S::Error::custom("summary tensors are not serializable as attributes"));
        }
        let data = self.to_f64_vec().into_iter().map(|v| encode_number(v, dtype)).collect();
        TensorRepr {
            dtype,
            dims: self.dims.clone(),
            data,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for TensorValue {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let repr = TensorRepr::deserialize(d)?;
        let values = repr
            .data
            .iter()
            .map(decode_number)
            .collect::<Result<Vec<_>, _>>()
            .map_err(D::Error::custom)?;
        if repr.dtype == DType::Summary {
            return Err(D::Error::custom("summary tensors are not valid attributes"));
        }
        TensorValue::from_values(repr.dtype, &repr.dims, &values).map_err(D::Error::custom)
    }
}
