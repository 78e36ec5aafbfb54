//! Per-kind dtype and shape inference.

use super::op::{Attrs, OpKind};
use super::{GraphError, TensorRef, TensorSpec};
use crate::tensor::{DType, Dim, Shape};

fn shape_err(kind: OpKind, detail: impl Into<String>) -> GraphError {
    GraphError::ShapeIncompatible {
        kind,
        detail: detail.into(),
    }
}

fn missing(kind: OpKind, attr: &str) -> GraphError {
    GraphError::MissingAttr {
        kind,
        attr: attr.to_string(),
    }
}

/// The single float dtype shared by every input.
fn common_float(kind: OpKind, inputs: &[TensorRef]) -> Result<DType, GraphError> {
    let first = inputs
        .first()
        .map(|t| t.dtype)
        .ok_or_else(|| shape_err(kind, "no inputs"))?;
    if !first.is_float() {
        return Err(GraphError::DTypeMismatch {
            kind,
            detail: format!("expected a float dtype, got {first}"),
        });
    }
    if let Some(other) = inputs.iter().find(|t| t.dtype != first) {
        return Err(GraphError::DTypeMismatch {
            kind,
            detail: format!("mixed input dtypes {first} and {}", other.dtype),
        });
    }
    Ok(first)
}

/// Element-wise broadcast rule: equal shapes, a scalar against anything, or
/// a rank-1 vector of length k against a rank-2 (n, k) matrix.
pub fn broadcast(a: &Shape, b: &Shape) -> Option<Shape> {
    if a.compatible(b) {
        return Some(a.merge(b));
    }
    if a.rank() == 0 {
        return Some(b.clone());
    }
    if b.rank() == 0 {
        return Some(a.clone());
    }
    let row = |m: &Shape, v: &Shape| {
        (m.rank() == 2 && v.rank() == 1 && m.0[1].compatible(v.0[0])).then(|| Shape(vec![m.0[0], m.0[1].merge(v.0[0])]))
    };
    row(a, b).or_else(|| row(b, a))
}

/// Validated reduction axes; an empty list means every axis.
pub fn reduction_axes(kind: OpKind, attrs: &Attrs, rank: usize) -> Result<Vec<usize>, GraphError> {
    let raw = attrs.ints("axes").ok_or_else(|| missing(kind, "axes"))?;
    if raw.is_empty() {
        return Ok((0..rank).collect());
    }
    let mut axes = Vec::with_capacity(raw.len());
    for &a in raw {
        let norm = if a < 0 { a + rank as i64 } else { a };
        if norm < 0 || norm >= rank as i64 {
            return Err(shape_err(kind, format!("axis {a} out of range for rank {rank}")));
        }
        let norm = norm as usize;
        if axes.contains(&norm) {
            return Err(shape_err(kind, format!("axis {a} repeated")));
        }
        axes.push(norm);
    }
    axes.sort_unstable();
    Ok(axes)
}

pub fn reduced_shape(shape: &Shape, axes: &[usize]) -> Shape {
    Shape(
        shape
            .0
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, d)| *d)
            .collect(),
    )
}

fn spec(dtype: DType, shape: Shape) -> TensorSpec {
    TensorSpec { dtype, shape }
}

fn declared(kind: OpKind, attrs: &Attrs) -> Result<(DType, Shape), GraphError> {
    let dtype = attrs.dtype("dtype").ok_or_else(|| missing(kind, "dtype"))?;
    let shape = attrs.shape("shape").ok_or_else(|| missing(kind, "shape"))?.clone();
    Ok((dtype, shape))
}

/// Only the leading extent of a declared shape may be dynamic.
fn check_leading_dynamic(kind: OpKind, shape: &Shape) -> Result<(), GraphError> {
    if shape.0.iter().skip(1).any(|d| *d == Dim::Dynamic) {
        return Err(shape_err(
            kind,
            format!("only the leading dimension may be dynamic, got {shape}"),
        ));
    }
    Ok(())
}

/// Output specs of a node, or the reason its inputs and attributes are invalid.
pub fn infer(kind: OpKind, inputs: &[TensorRef], attrs: &Attrs) -> Result<Vec<TensorSpec>, GraphError> {
    use OpKind::*;
    let arity = kind.arity();
    if !arity.admits(inputs.len()) {
        return Err(GraphError::ArityMismatch {
            kind,
            expected: arity.to_string(),
            got: inputs.len(),
        });
    }
    let out = match kind {
        Const => {
            let v = attrs.tensor("value").ok_or_else(|| missing(kind, "value"))?;
            vec![spec(v.dtype(), Shape::known(v.dims()))]
        }
        Placeholder => {
            let (dtype, shape) = declared(kind, attrs)?;
            check_leading_dynamic(kind, &shape)?;
            vec![spec(dtype, shape)]
        }
        Variable => {
            let (dtype, shape) = declared(kind, attrs)?;
            if !shape.is_concrete() {
                return Err(GraphError::DynamicShapeInitializer(shape.to_string()));
            }
            vec![spec(dtype, shape)]
        }
        Assign => {
            let dtype = common_float(kind, inputs)?;
            if !inputs[0].shape.compatible(&inputs[1].shape) {
                return Err(shape_err(
                    kind,
                    format!("value {} does not fit variable {}", inputs[1].shape, inputs[0].shape),
                ));
            }
            vec![spec(dtype, inputs[0].shape.clone())]
        }
        Add | Sub | Mul | Equal => {
            let dtype = common_float(kind, inputs)?;
            let shape = broadcast(&inputs[0].shape, &inputs[1].shape).ok_or_else(|| {
                shape_err(
                    kind,
                    format!("cannot combine {} with {}", inputs[0].shape, inputs[1].shape),
                )
            })?;
            vec![spec(dtype, shape)]
        }
        MatMul => {
            let dtype = common_float(kind, inputs)?;
            let (a, b) = (&inputs[0].shape, &inputs[1].shape);
            if a.rank() != 2 || b.rank() != 2 {
                return Err(shape_err(kind, format!("operands must be matrices, got {a} and {b}")));
            }
            let (ar, ac) = if attrs.flag("transpose_a") {
                (a.0[1], a.0[0])
            } else {
                (a.0[0], a.0[1])
            };
            let (br, bc) = if attrs.flag("transpose_b") {
                (b.0[1], b.0[0])
            } else {
                (b.0[0], b.0[1])
            };
            if !ac.compatible(br) {
                return Err(shape_err(kind, format!("inner dimensions differ: {ac} vs {br}")));
            }
            vec![spec(dtype, Shape(vec![ar, bc]))]
        }
        CastTruncate16 => {
            if inputs[0].dtype != DType::F32 {
                return Err(GraphError::DTypeMismatch {
                    kind,
                    detail: format!("truncation applies to f32 only, got {}", inputs[0].dtype),
                });
            }
            vec![spec(DType::F32, inputs[0].shape.clone())]
        }
        Exp | Log | Neg | Sigmoid | Relu | ZerosLike | Reciprocal | SigmoidDeriv | ReluDeriv => {
            let dtype = common_float(kind, inputs)?;
            vec![spec(dtype, inputs[0].shape.clone())]
        }
        Softmax => {
            let dtype = common_float(kind, inputs)?;
            if inputs[0].shape.rank() == 0 {
                return Err(shape_err(kind, "softmax needs rank >= 1"));
            }
            vec![spec(dtype, inputs[0].shape.clone())]
        }
        ReduceSum | ReduceMean => {
            let dtype = common_float(kind, inputs)?;
            let axes = reduction_axes(kind, attrs, inputs[0].shape.rank())?;
            vec![spec(dtype, reduced_shape(&inputs[0].shape, &axes))]
        }
        ArgMax => {
            let dtype = common_float(kind, inputs)?;
            let rank = inputs[0].shape.rank() as i64;
            let axis = attrs.int("axis").ok_or_else(|| missing(kind, "axis"))?;
            let axis = if axis < 0 { axis + rank } else { axis };
            if axis < 0 || axis >= rank {
                return Err(shape_err(kind, format!("axis out of range for rank {rank}")));
            }
            vec![spec(dtype, reduced_shape(&inputs[0].shape, &[axis as usize]))]
        }
        Switch => {
            let dtype = common_float(kind, inputs)?;
            if inputs[1].shape.rank() != 0 {
                return Err(shape_err(kind, "predicate must be a scalar"));
            }
            let s = spec(dtype, inputs[0].shape.clone());
            vec![s.clone(), s]
        }
        Merge => {
            let dtype = common_float(kind, inputs)?;
            if inputs[2].shape.rank() != 0 {
                return Err(shape_err(kind, "predicate must be a scalar"));
            }
            if !inputs[0].shape.compatible(&inputs[1].shape) {
                return Err(shape_err(
                    kind,
                    format!("branches disagree: {} vs {}", inputs[0].shape, inputs[1].shape),
                ));
            }
            vec![spec(dtype, inputs[0].shape.merge(&inputs[1].shape))]
        }
        SoftmaxGrad => {
            let dtype = common_float(kind, inputs)?;
            if !inputs[0].shape.compatible(&inputs[1].shape) {
                return Err(shape_err(kind, "forward output and gradient differ in shape"));
            }
            vec![spec(dtype, inputs[0].shape.merge(&inputs[1].shape))]
        }
        SumGrad | MeanGrad => {
            let dtype = common_float(kind, inputs)?;
            let x = &inputs[1].shape;
            let axes = reduction_axes(kind, attrs, x.rank())?;
            if !reduced_shape(x, &axes).compatible(&inputs[0].shape) {
                return Err(shape_err(
                    kind,
                    format!("gradient {} does not match reduced {x}", inputs[0].shape),
                ));
            }
            vec![spec(dtype, x.clone())]
        }
        Save => {
            let names = attrs.strs("names").ok_or_else(|| missing(kind, "names"))?;
            attrs.str("path").ok_or_else(|| missing(kind, "path"))?;
            if names.len() != inputs.len() {
                return Err(GraphError::InvalidAttr {
                    kind,
                    detail: format!("{} names for {} tensors", names.len(), inputs.len()),
                });
            }
            if let Some(t) = inputs.iter().find(|t| !t.dtype.is_float()) {
                return Err(GraphError::DTypeMismatch {
                    kind,
                    detail: format!("only float tensors can be saved, got {}", t.dtype),
                });
            }
            vec![]
        }
        Restore => {
            attrs.str("path").ok_or_else(|| missing(kind, "path"))?;
            attrs.str("name").ok_or_else(|| missing(kind, "name"))?;
            let (dtype, shape) = declared(kind, attrs)?;
            vec![spec(dtype, shape)]
        }
        Send => {
            attrs.int("channel").ok_or_else(|| missing(kind, "channel"))?;
            vec![]
        }
        Recv => {
            attrs.int("channel").ok_or_else(|| missing(kind, "channel"))?;
            if attrs.flag("control") {
                vec![]
            } else {
                let (dtype, shape) = declared(kind, attrs)?;
                vec![spec(dtype, shape)]
            }
        }
        ScalarSummary | HistogramSummary => {
            attrs.str("tag").ok_or_else(|| missing(kind, "tag"))?;
            common_float(kind, inputs)?;
            if kind == ScalarSummary && inputs[0].shape.rank() != 0 {
                return Err(GraphError::NonScalarSummaryInput(inputs[0].shape.to_string()));
            }
            vec![spec(DType::Summary, Shape::known(&[1]))]
        }
        MergeSummaries => {
            if let Some(t) = inputs.iter().find(|t| t.dtype != DType::Summary) {
                return Err(GraphError::DTypeMismatch {
                    kind,
                    detail: format!("expected summary inputs, got {}", t.dtype),
                });
            }
            let total: Option<usize> = inputs.iter().map(|t| t.shape.0.first().and_then(|d| d.known())).sum();
            let dim = total.map_or(Dim::Dynamic, Dim::Known);
            vec![spec(DType::Summary, Shape(vec![dim]))]
        }
        NoOp => vec![],
    };
    Ok(out)
}
