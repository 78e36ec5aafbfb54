//! Forward kernels for every stateless operation kind, in F32 and F64.
//!
//! Kernels are pure functions of their inputs. Reductions and matrix products
//! accumulate in a fixed index order, so repeated calls are bit-identical.

use num_traits::Float;

use crate::graph::infer::reduction_axes;
use crate::graph::{Attrs, OpKind};
use crate::passes::truncate::truncate16_f32;
use crate::summaries::SummaryValue;
use crate::tensor::{DType, TensorData, TensorValue};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KernelError {
    #[error("{kind}: runtime shape mismatch: {detail}")]
    RuntimeShapeMismatch { kind: OpKind, detail: String },
    #[error("{kind}: expected {expected} inputs, got {got:?}")]
    DTypeMismatch {
        kind: OpKind,
        expected: DType,
        got: Vec<DType>,
    },
    #[error("{kind}: {detail}")]
    BadAttr { kind: OpKind, detail: String },
    #[error("{0} has no pure kernel; the runtime executes it")]
    NotAKernel(OpKind),
}

/// Kinds that [`eval`] can execute.
pub fn has_kernel(kind: OpKind) -> bool {
    use OpKind::*;
    !matches!(
        kind,
        Variable | Placeholder | Assign | Switch | Merge | Save | Restore | Send | Recv | NoOp
    )
}

/// Element types kernels are generic over.
pub trait Elem: Float + std::fmt::Debug + Send + Sync + 'static {
    const DTYPE: DType;
    fn slice(v: &TensorValue) -> Option<&[Self]>;
    fn wrap(dims: Vec<usize>, data: Vec<Self>) -> TensorValue;
    fn of(x: f64) -> Self;
}

impl Elem for f32 {
    const DTYPE: DType = DType::F32;

    fn slice(v: &TensorValue) -> Option<&[f32]> {
        v.as_f32()
    }

    fn wrap(dims: Vec<usize>, data: Vec<f32>) -> TensorValue {
        TensorValue::new(dims, TensorData::F32(data)).expect("kernel output sized from dims")
    }

    fn of(x: f64) -> f32 {
        x as f32
    }
}

impl Elem for f64 {
    const DTYPE: DType = DType::F64;

    fn slice(v: &TensorValue) -> Option<&[f64]> {
        v.as_f64()
    }

    fn wrap(dims: Vec<usize>, data: Vec<f64>) -> TensorValue {
        TensorValue::new(dims, TensorData::F64(data)).expect("kernel output sized from dims")
    }

    fn of(x: f64) -> f64 {
        x
    }
}

type Out = Result<Vec<TensorValue>, KernelError>;

/// Evaluates one node's computation.
pub fn eval(kind: OpKind, inputs: &[&TensorValue], attrs: &Attrs) -> Out {
    use OpKind::*;
    match kind {
        Const => {
            let v = attrs.tensor("value").ok_or_else(|| KernelError::BadAttr {
                kind,
                detail: "missing value".into(),
            })?;
            Ok(vec![v.clone()])
        }
        ScalarSummary | HistogramSummary => summarize(kind, inputs, attrs),
        MergeSummaries => {
            let mut all = Vec::new();
            for v in inputs {
                let s = v
                    .as_summaries()
                    .ok_or_else(|| dtype_err(kind, DType::Summary, inputs))?;
                all.extend_from_slice(s);
            }
            Ok(vec![TensorValue::summaries(all)])
        }
        k if !has_kernel(k) => Err(KernelError::NotAKernel(k)),
        _ => match inputs.first().map(|v| v.dtype()) {
            Some(DType::F32) => eval_typed::<f32>(kind, inputs, attrs),
            Some(DType::F64) => eval_typed::<f64>(kind, inputs, attrs),
            _ => Err(dtype_err(kind, DType::F32, inputs)),
        },
    }
}

fn dtype_err(kind: OpKind, expected: DType, inputs: &[&TensorValue]) -> KernelError {
    KernelError::DTypeMismatch {
        kind,
        expected,
        got: inputs.iter().map(|v| v.dtype()).collect(),
    }
}

fn shape_err(kind: OpKind, detail: impl Into<String>) -> KernelError {
    KernelError::RuntimeShapeMismatch {
        kind,
        detail: detail.into(),
    }
}

fn summarize(kind: OpKind, inputs: &[&TensorValue], attrs: &Attrs) -> Out {
    let tag = attrs.str("tag").ok_or_else(|| KernelError::BadAttr {
        kind,
        detail: "missing tag".into(),
    })?;
    let x = inputs[0];
    if !x.dtype().is_float() {
        return Err(dtype_err(kind, DType::F32, inputs));
    }
    let value = if kind == OpKind::ScalarSummary {
        let v = x
            .scalar_value()
            .ok_or_else(|| shape_err(kind, format!("scalar summary of dims {:?}", x.dims())))?;
        SummaryValue::scalar(tag, v)
    } else {
        SummaryValue::histogram(tag, &x.to_f64_vec())
    };
    Ok(vec![TensorValue::summaries(vec![value])])
}

fn eval_typed<T: Elem>(kind: OpKind, inputs: &[&TensorValue], attrs: &Attrs) -> Out {
    use OpKind::*;
    let mut data = Vec::with_capacity(inputs.len());
    for v in inputs {
        data.push(T::slice(v).ok_or_else(|| dtype_err(kind, T::DTYPE, inputs))?);
    }
    let dims0 = inputs[0].dims().to_vec();
    let unary = |f: &dyn Fn(T) -> T| Ok(vec![T::wrap(dims0.clone(), data[0].iter().map(|&x| f(x)).collect())]);
    match kind {
        Add => binary::<T>(kind, inputs, |a, b| a + b),
        Sub => binary::<T>(kind, inputs, |a, b| a - b),
        Mul => binary::<T>(kind, inputs, |a, b| a * b),
        Equal => binary::<T>(kind, inputs, |a, b| if a == b { T::one() } else { T::zero() }),
        MatMul => matmul::<T>(inputs, attrs.flag("transpose_a"), attrs.flag("transpose_b")).map(|v| vec![v]),
        Exp => unary(&|x: T| x.exp()),
        Log => unary(&|x: T| x.ln()),
        Neg => unary(&|x: T| -x),
        Sigmoid => unary(&sigmoid::<T>),
        Relu => unary(&|x: T| if x < T::zero() { T::zero() } else { x }),
        Reciprocal => unary(&|x: T| T::one() / x),
        SigmoidDeriv => unary(&|y: T| y * (T::one() - y)),
        ReluDeriv => unary(&|x: T| if x > T::zero() { T::one() } else { T::zero() }),
        ZerosLike => unary(&|_| T::zero()),
        CastTruncate16 => {
            let x = inputs[0].as_f32().ok_or_else(|| dtype_err(kind, DType::F32, inputs))?;
            Ok(vec![f32::wrap(dims0, x.iter().map(|&v| truncate16_f32(v)).collect())])
        }
        Softmax => softmax::<T>(kind, &dims0, data[0]).map(|v| vec![v]),
        SoftmaxGrad => softmax_grad::<T>(kind, inputs, &data).map(|v| vec![v]),
        ReduceSum | ReduceMean => {
            let axes = axes_for(kind, attrs, dims0.len())?;
            let (map, out_dims, count) = reduction_map(&dims0, &axes);
            let mut out = vec![T::zero(); out_dims.iter().product()];
            for (i, &x) in data[0].iter().enumerate() {
                out[map[i]] = out[map[i]] + x;
            }
            if kind == ReduceMean {
                let c = T::of(count as f64);
                out.iter_mut().for_each(|v| *v = *v / c);
            }
            Ok(vec![T::wrap(out_dims, out)])
        }
        SumGrad | MeanGrad => {
            let x_dims = inputs[1].dims().to_vec();
            let axes = axes_for(kind, attrs, x_dims.len())?;
            let (map, out_dims, count) = reduction_map(&x_dims, &axes);
            if out_dims != inputs[0].dims() {
                return Err(shape_err(
                    kind,
                    format!("gradient dims {:?}, expected {out_dims:?}", inputs[0].dims()),
                ));
            }
            let dy = data[0];
            let scale = if kind == MeanGrad {
                T::one() / T::of(count as f64)
            } else {
                T::one()
            };
            let out = map
                .iter()
                .map(|&j| if kind == MeanGrad { dy[j] * scale } else { dy[j] })
                .collect();
            Ok(vec![T::wrap(x_dims, out)])
        }
        ArgMax => {
            let rank = dims0.len() as i64;
            let axis = attrs.int("axis").unwrap_or(0);
            let axis = if axis < 0 { axis + rank } else { axis };
            if axis < 0 || axis >= rank {
                return Err(KernelError::BadAttr {
                    kind,
                    detail: format!("axis out of range for rank {rank}"),
                });
            }
            let axis = axis as usize;
            let (map, out_dims, _) = reduction_map(&dims0, &[axis]);
            let stride: usize = dims0[axis + 1..].iter().product();
            let n = out_dims.iter().product();
            let mut best: Vec<Option<(T, usize)>> = vec![None; n];
            for (i, &x) in data[0].iter().enumerate() {
                let pos = (i / stride) % dims0[axis];
                let slot = &mut best[map[i]];
                match slot {
                    Some((b, _)) if x.partial_cmp(b) != Some(std::cmp::Ordering::Greater) => {}
                    _ => *slot = Some((x, pos)),
                }
            }
            let out = best
                .into_iter()
                .map(|b| T::of(b.map_or(0, |(_, p)| p) as f64))
                .collect();
            Ok(vec![T::wrap(out_dims, out)])
        }
        _ => Err(KernelError::NotAKernel(kind)),
    }
}

fn sigmoid<T: Elem>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn axes_for(kind: OpKind, attrs: &Attrs, rank: usize) -> Result<Vec<usize>, KernelError> {
    reduction_axes(kind, attrs, rank).map_err(|e| KernelError::BadAttr {
        kind,
        detail: e.to_string(),
    })
}

/// For a reduction of `dims` over `axes`: the output position of every input
/// element, the output dims and the number of elements folded into each output.
pub fn reduction_map(dims: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>, usize) {
    let out_dims: Vec<usize> = dims
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect();
    let count: usize = axes.iter().map(|&a| dims[a]).product();
    let total: usize = dims.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut index = vec![0usize; dims.len()];
    for _ in 0..total {
        let mut flat = 0;
        for (axis, &i) in index.iter().enumerate() {
            if !axes.contains(&axis) {
                flat = flat * dims[axis] + i;
            }
        }
        map.push(flat);
        for axis in (0..dims.len()).rev() {
            index[axis] += 1;
            if index[axis] < dims[axis] {
                break;
            }
            index[axis] = 0;
        }
    }
    (map, out_dims, count)
}

/// Element-wise combination with the supported broadcasts: equal dims, a
/// scalar against anything, and a vector against the rows of a matrix.
fn binary<T: Elem>(kind: OpKind, inputs: &[&TensorValue], f: impl Fn(T, T) -> T) -> Out {
    let (a, b) = (inputs[0], inputs[1]);
    let (x, y) = (T::slice(a).expect("checked"), T::slice(b).expect("checked"));
    let (ad, bd) = (a.dims(), b.dims());
    let (dims, out): (Vec<usize>, Vec<T>) = if ad == bd {
        (ad.to_vec(), x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect())
    } else if ad.is_empty() {
        (bd.to_vec(), y.iter().map(|&q| f(x[0], q)).collect())
    } else if bd.is_empty() {
        (ad.to_vec(), x.iter().map(|&p| f(p, y[0])).collect())
    } else if ad.len() == 2 && bd.len() == 1 && ad[1] == bd[0] {
        let k = bd[0];
        (
            ad.to_vec(),
            x.iter().enumerate().map(|(i, &p)| f(p, y[i % k])).collect(),
        )
    } else if ad.len() == 1 && bd.len() == 2 && bd[1] == ad[0] {
        let k = ad[0];
        (
            bd.to_vec(),
            y.iter().enumerate().map(|(i, &q)| f(x[i % k], q)).collect(),
        )
    } else {
        return Err(shape_err(kind, format!("cannot combine {ad:?} with {bd:?}")));
    };
    Ok(vec![T::wrap(dims, out)])
}

fn transposed<T: Elem>(data: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for c in 0..cols {
        for r in 0..rows {
            out.push(data[r * cols + c]);
        }
    }
    out
}

/// `op(a) * op(b)`; each output element sums over the inner index in
/// ascending order starting from zero.
pub fn matmul<T: Elem>(inputs: &[&TensorValue], ta: bool, tb: bool) -> Result<TensorValue, KernelError> {
    let kind = OpKind::MatMul;
    let (a, b) = (inputs[0], inputs[1]);
    if a.rank() != 2 || b.rank() != 2 {
        return Err(shape_err(kind, "operands must be matrices"));
    }
    let (x, y) = (
        T::slice(a).ok_or_else(|| dtype_err(kind, T::DTYPE, inputs))?,
        T::slice(b).ok_or_else(|| dtype_err(kind, T::DTYPE, inputs))?,
    );
    let (ad, bd) = (a.dims(), b.dims());
    let (n, k, lhs) = if ta {
        (ad[1], ad[0], transposed(x, ad[0], ad[1]))
    } else {
        (ad[0], ad[1], x.to_vec())
    };
    let (k2, m, rhs) = if tb {
        (bd[1], bd[0], transposed(y, bd[0], bd[1]))
    } else {
        (bd[0], bd[1], y.to_vec())
    };
    if k != k2 {
        return Err(shape_err(kind, format!("inner dimensions differ: {k} vs {k2}")));
    }
    let mut out = vec![T::zero(); n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for p in 0..k {
            let av = lhs[i * k + p];
            let brow = &rhs[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
    Ok(T::wrap(vec![n, m], out))
}

fn softmax<T: Elem>(kind: OpKind, dims: &[usize], x: &[T]) -> Result<TensorValue, KernelError> {
    let k = *dims.last().ok_or_else(|| shape_err(kind, "softmax needs rank >= 1"))?;
    let mut out = Vec::with_capacity(x.len());
    if k > 0 {
        for row in x.chunks(k) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
            let sum = exps.iter().copied().fold(T::zero(), |a, b| a + b);
            out.extend(exps.into_iter().map(|e| e / sum));
        }
    }
    Ok(T::wrap(dims.to_vec(), out))
}

/// `dx = y * (dy - sum(dy * y))` per row of the last axis.
fn softmax_grad<T: Elem>(kind: OpKind, inputs: &[&TensorValue], data: &[&[T]]) -> Result<TensorValue, KernelError> {
    let dims = inputs[0].dims();
    if dims != inputs[1].dims() {
        return Err(shape_err(kind, "output and gradient dims differ"));
    }
    let k = *dims.last().ok_or_else(|| shape_err(kind, "rank 0"))?;
    let (y, dy) = (data[0], data[1]);
    let mut out = Vec::with_capacity(y.len());
    if k > 0 {
        for (yr, gr) in y.chunks(k).zip(dy.chunks(k)) {
            let dot = yr.iter().zip(gr).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
            out.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
        }
    }
    Ok(T::wrap(dims.to_vec(), out))
}
