//! Operation kinds, their static metadata and node attributes.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::tensor::{DType, Shape, TensorValue};

macro_rules! op_kinds {
    ($($kind:ident),* $(,)?) => {
        /// Every operation the engine knows how to build and execute.
        ///
        /// Parameters such as reduction axes live in the node's attributes,
        /// so the kind itself is a plain tag usable in kernel tables.
        #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
        pub enum OpKind {
            $($kind),*
        }

        impl OpKind {
            pub const ALL: &'static [OpKind] = &[$(OpKind::$kind),*];

            pub fn as_str(self) -> &'static str {
                match self {
                    $(OpKind::$kind => stringify!($kind)),*
                }
            }
        }

        impl FromStr for OpKind {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                match s {
                    $(stringify!($kind) => Ok(OpKind::$kind),)*
                    other => Err(other.to_string()),
                }
            }
        }
    };
}

op_kinds! {
    Const,
    Variable,
    Placeholder,
    Assign,
    Add,
    Sub,
    Mul,
    MatMul,
    Exp,
    Log,
    Neg,
    Sigmoid,
    Relu,
    Softmax,
    ReduceSum,
    ReduceMean,
    Equal,
    ArgMax,
    CastTruncate16,
    Switch,
    Merge,
    Save,
    Restore,
    Send,
    Recv,
    ScalarSummary,
    HistogramSummary,
    MergeSummaries,
    NoOp,
    // helpers emitted by gradient construction
    ZerosLike,
    Reciprocal,
    SigmoidDeriv,
    ReluDeriv,
    SoftmaxGrad,
    SumGrad,
    MeanGrad,
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for OpKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for OpKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse()
            .map_err(|s| serde::de::Error::custom(format!("unknown op kind {s:?}")))
    }
}

/// Input arity bounds for a kind; `max == None` means unbounded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arity {
    pub min: usize,
    pub max: Option<usize>,
}

impl Arity {
    const fn exactly(n: usize) -> Arity {
        Arity { min: n, max: Some(n) }
    }

    const fn at_least(n: usize) -> Arity {
        Arity { min: n, max: None }
    }

    pub fn admits(self, n: usize) -> bool {
        n >= self.min && self.max.is_none_or(|m| n <= m)
    }
}

impl fmt::Display for Arity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.max {
            Some(m) if m == self.min => write!(f, "{m}"),
            Some(m) => write!(f, "{}..={m}", self.min),
            None => write!(f, "at least {}", self.min),
        }
    }
}

impl OpKind {
    pub fn arity(self) -> Arity {
        use OpKind::*;
        match self {
            Const | Variable | Placeholder | Restore | Recv | NoOp => Arity::exactly(0),
            Exp | Log | Neg | Sigmoid | Relu | Softmax | ReduceSum | ReduceMean | ArgMax | CastTruncate16
            | ScalarSummary | HistogramSummary | ZerosLike | Reciprocal | SigmoidDeriv | ReluDeriv => Arity::exactly(1),
            Assign | Add | Sub | Mul | MatMul | Equal | Switch | SoftmaxGrad | SumGrad | MeanGrad => Arity::exactly(2),
            Merge => Arity::exactly(3),
            Save => Arity::at_least(1),
            Send => Arity { min: 0, max: Some(1) },
            MergeSummaries => Arity::at_least(0),
        }
    }

    /// Kinds whose execution reads or writes state outside the dataflow,
    /// or whose identity matters beyond its inputs. These are never merged.
    pub fn is_stateful(self) -> bool {
        use OpKind::*;
        matches!(
            self,
            Variable
                | Assign
                | Save
                | Restore
                | Placeholder
                | Send
                | Recv
                | ScalarSummary
                | HistogramSummary
                | MergeSummaries
        )
    }

    /// Kinds with a registered gradient rule.
    pub fn is_differentiable(self) -> bool {
        use OpKind::*;
        matches!(
            self,
            Add | Sub
                | Mul
                | MatMul
                | Exp
                | Log
                | Neg
                | Sigmoid
                | Relu
                | Softmax
                | ReduceSum
                | ReduceMean
                | Assign
                | Switch
                | Merge
        )
    }

    pub fn is_elementwise_unary(self) -> bool {
        use OpKind::*;
        matches!(
            self,
            Exp | Log | Neg | Sigmoid | Relu | CastTruncate16 | ZerosLike | Reciprocal | SigmoidDeriv | ReluDeriv
        )
    }

    pub fn is_elementwise_binary(self) -> bool {
        matches!(self, OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Equal)
    }

    pub fn is_summary(self) -> bool {
        matches!(
            self,
            OpKind::ScalarSummary | OpKind::HistogramSummary | OpKind::MergeSummaries
        )
    }

    /// Input positions that are reference edges rather than data edges:
    /// the consumer names the producer's state instead of reading its value.
    pub fn is_ref_input(self, index: usize) -> bool {
        self == OpKind::Assign && index == 0
    }
}

/// A single attribute value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttrValue {
    Int(i64),
    Float(f64),
    Str(String),
    Shape(Shape),
    DType(DType),
    Ints(Vec<i64>),
    Strs(Vec<String>),
    Tensor(TensorValue),
}

impl From<i64> for AttrValue {
    fn from(v: i64) -> Self {
        AttrValue::Int(v)
    }
}

impl From<bool> for AttrValue {
    fn from(v: bool) -> Self {
        AttrValue::Int(v as i64)
    }
}

impl From<f64> for AttrValue {
    fn from(v: f64) -> Self {
        AttrValue::Float(v)
    }
}

impl From<&str> for AttrValue {
    fn from(v: &str) -> Self {
        AttrValue::Str(v.to_string())
    }
}

impl From<String> for AttrValue {
    fn from(v: String) -> Self {
        AttrValue::Str(v)
    }
}

impl From<Shape> for AttrValue {
    fn from(v: Shape) -> Self {
        AttrValue::Shape(v)
    }
}

impl From<DType> for AttrValue {
    fn from(v: DType) -> Self {
        AttrValue::DType(v)
    }
}

impl From<Vec<i64>> for AttrValue {
    fn from(v: Vec<i64>) -> Self {
        AttrValue::Ints(v)
    }
}

impl From<Vec<String>> for AttrValue {
    fn from(v: Vec<String>) -> Self {
        AttrValue::Strs(v)
    }
}

impl From<TensorValue> for AttrValue {
    fn from(v: TensorValue) -> Self {
        AttrValue::Tensor(v)
    }
}

/// Sorted attribute map; sorting keeps serialization and CSE keys stable.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Attrs(pub BTreeMap<String, AttrValue>);

impl Attrs {
    pub fn new() -> Attrs {
        Attrs::default()
    }

    pub fn with(mut self, key: &str, value: impl Into<AttrValue>) -> Attrs {
        self.0.insert(key.to_string(), value.into());
        self
    }

    pub fn set(&mut self, key: &str, value: impl Into<AttrValue>) {
        self.0.insert(key.to_string(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&AttrValue> {
        self.0.get(key)
    }

    pub fn int(&self, key: &str) -> Option<i64> {
        match self.0.get(key) {
            Some(AttrValue::Int(v)) => Some(*v),
            _ => None,
        }
    }

    pub fn flag(&self, key: &str) -> bool {
        self.int(key).unwrap_or(0) != 0
    }

    pub fn str(&self, key: &str) -> Option<&str> {
        match self.0.get(key) {
            Some(AttrValue::Str(v)) => Some(v),
            _ => None,
        }
    }

    pub fn shape(&self, key: &str) -> Option<&Shape> {
        match self.0.get(key) {
            Some(AttrValue::Shape(v)) => Some(v),
            _ => None,
        }
    }

    pub fn dtype(&self, key: &str) -> Option<DType> {
        match self.0.get(key) {
            Some(AttrValue::DType(v)) => Some(*v),
            _ => None,
        }
    }

    pub fn ints(&self, key: &str) -> Option<&[i64]> {
        match self.0.get(key) {
            Some(AttrValue::Ints(v)) => Some(v),
            _ => None,
        }
    }

    pub fn strs(&self, key: &str) -> Option<&[String]> {
        match self.0.get(key) {
            Some(AttrValue::Strs(v)) => Some(v),
            _ => None,
        }
    }

    pub fn tensor(&self, key: &str) -> Option<&TensorValue> {
        match self.0.get(key) {
            Some(AttrValue::Tensor(v)) => Some(v),
            _ => None,
        }
    }

    /// Canonical text form, used as part of structural identity keys.
    pub fn canonical(&self) -> String {
        serde_json::to_string(&self.0).unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kind_names_round_trip() {
        for &k in OpKind::ALL {
            assert_eq!(k.as_str().parse::<OpKind>().unwrap(), k);
        }
        assert!("Conv9D".parse::<OpKind>().is_err());
    }

    #[test]
    fn arity_bounds() {
        assert!(OpKind::Add.arity().admits(2));
        assert!(!OpKind::Add.arity().admits(3));
        assert!(OpKind::Save.arity().admits(5));
        assert!(!OpKind::Save.arity().admits(0));
        assert!(OpKind::Send.arity().admits(0));
    }

    #[test]
    fn only_listed_kinds_are_stateful() {
        let stateful: Vec<_> = OpKind::ALL.iter().filter(|k| k.is_stateful()).collect();
        assert_eq!(stateful.len(), 10);
        assert!(!OpKind::Const.is_stateful());
        assert!(!OpKind::Switch.is_stateful());
    }
}
