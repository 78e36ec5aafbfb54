//! Symbol-to-symbol reverse-mode differentiation.
//!
//! [`gradients`] walks backwards from a scalar target and adds gradient nodes
//! to the graph, so derivatives are ordinary graph outputs. Forward tensors
//! are referenced rather than recomputed. Contributions reaching a tensor
//! along several paths are summed with Add nodes.

use std::collections::{BTreeSet, HashMap};

use crate::graph::{Attrs, Graph, GraphError, Node, NodeDef, NodeId, OpKind, TensorId, TensorRef};
use crate::tensor::{Shape, TensorValue};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AutodiffError {
    #[error("gradient target must be a scalar, got shape {0}")]
    NonScalarTarget(String),
    #[error("{wrt} reaches the target only through non-differentiable operations")]
    NonDifferentiablePath { wrt: String },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Scope under which every gradient node is named.
pub const GRADIENT_SCOPE: &str = "gradients";

/// Adds nodes computing `d target / d w` for each `w` in `wrt` and returns
/// handles to them, in order.
///
/// A `w` that does not influence the target at all gets a zero tensor. A `w`
/// that is an ancestor of the target, but only through operations without a
/// gradient rule, is an error.
pub fn gradients(graph: &mut Graph, target: &TensorRef, wrt: &[TensorRef]) -> Result<Vec<TensorRef>, AutodiffError> {
    if target.shape.rank() != 0 {
        return Err(AutodiffError::NonScalarTarget(target.shape.to_string()));
    }
    let ancestors = data_ancestors(graph, target.node);
    let descendants = data_descendants(graph, wrt.iter().map(|w| w.node));
    let relevant: BTreeSet<NodeId> = ancestors.intersection(&descendants).copied().collect();

    let mut b = Builder {
        cache: HashMap::new(),
        contributions: HashMap::new(),
        totals: HashMap::new(),
    };
    let seed = graph.scoped(GRADIENT_SCOPE, |g| {
        g.constant_named(TensorValue::scalar(target.dtype, 1.0), "grad_ys")
    })?;
    b.contributions.insert(target.id(), vec![seed]);

    let order = graph.topological_order()?;
    for &id in order.iter().rev() {
        if !relevant.contains(&id) {
            continue;
        }
        let node = graph.expect_node(id).clone();
        let scope = format!("{GRADIENT_SCOPE}/{}", node.name);
        let output_grads: Vec<Option<TensorRef>> = (0..node.outputs.len())
            .map(|k| b.total(graph, &scope, node.output(k).id()))
            .collect::<Result<_, _>>()?;
        if output_grads.iter().all(Option::is_none) || !node.kind.is_differentiable() {
            continue;
        }
        let wanted: Vec<bool> = node
            .inputs
            .iter()
            .enumerate()
            .map(|(i, t)| !node.kind.is_ref_input(i) && relevant.contains(&t.node))
            .collect();
        let input_grads = graph.scoped(&scope, |g| b.rule(g, &node, &output_grads, &wanted))?;
        for (i, grad) in input_grads.into_iter().enumerate() {
            if let (Some(grad), true) = (grad, wanted[i]) {
                b.contributions.entry(node.inputs[i].id()).or_default().push(grad);
            }
        }
    }

    let mut out = Vec::with_capacity(wrt.len());
    for w in wrt {
        let scope = format!("{GRADIENT_SCOPE}/{}", graph.expect_node(w.node).name);
        match b.total(graph, &scope, w.id())? {
            Some(t) => out.push(t),
            None if ancestors.contains(&w.node) => {
                return Err(AutodiffError::NonDifferentiablePath {
                    wrt: graph.expect_node(w.node).name.clone(),
                })
            }
            None => out.push(graph.scoped(&scope, |g| b.zeros(g, w))?),
        }
    }
    Ok(out)
}

fn data_ancestors(graph: &Graph, target: NodeId) -> BTreeSet<NodeId> {
    let mut seen = BTreeSet::new();
    let mut stack = vec![target];
    while let Some(id) = stack.pop() {
        if seen.insert(id) {
            stack.extend(graph.expect_node(id).data_inputs().map(|(_, t)| t.node));
        }
    }
    seen
}

fn data_descendants(graph: &Graph, roots: impl IntoIterator<Item = NodeId>) -> BTreeSet<NodeId> {
    let mut consumers: HashMap<NodeId, Vec<NodeId>> = HashMap::new();
    for n in graph.nodes() {
        for (_, t) in n.data_inputs() {
            consumers.entry(t.node).or_default().push(n.id);
        }
    }
    let mut seen = BTreeSet::new();
    let mut stack: Vec<NodeId> = roots.into_iter().collect();
    while let Some(id) = stack.pop() {
        if seen.insert(id) {
            stack.extend(consumers.get(&id).into_iter().flatten().copied());
        }
    }
    seen
}

struct Builder {
    /// Nodes created by this call, keyed by structure, so no gradient node is
    /// ever built twice.
    cache: HashMap<String, Vec<TensorRef>>,
    contributions: HashMap<TensorId, Vec<TensorRef>>,
    totals: HashMap<TensorId, TensorRef>,
}

type Grad = Result<TensorRef, GraphError>;

impl Builder {
    fn emit_all(
        &mut self,
        g: &mut Graph,
        kind: OpKind,
        inputs: &[&TensorRef],
        attrs: Attrs,
    ) -> Result<Vec<TensorRef>, GraphError> {
        let ids: Vec<String> = inputs.iter().map(|t| t.id().to_string()).collect();
        let key = format!("{kind}|{}|{}", ids.join(","), attrs.canonical());
        if let Some(hit) = self.cache.get(&key) {
            return Ok(hit.clone());
        }
        let outs = g.add_node(NodeDef::new(kind).inputs(inputs.iter().copied()).attrs(attrs))?;
        self.cache.insert(key, outs.clone());
        Ok(outs)
    }

    fn emit(&mut self, g: &mut Graph, kind: OpKind, inputs: &[&TensorRef], attrs: Attrs) -> Grad {
        Ok(self.emit_all(g, kind, inputs, attrs)?.remove(0))
    }

    fn op(&mut self, g: &mut Graph, kind: OpKind, inputs: &[&TensorRef]) -> Grad {
        self.emit(g, kind, inputs, Attrs::new())
    }

    /// Sum of all contributions to `t`, built once and cached.
    fn total(&mut self, g: &mut Graph, scope: &str, t: TensorId) -> Result<Option<TensorRef>, GraphError> {
        if let Some(done) = self.totals.get(&t) {
            return Ok(Some(done.clone()));
        }
        let parts = match self.contributions.get(&t) {
            Some(p) if !p.is_empty() => p.clone(),
            _ => return Ok(None),
        };
        let sum = g.scoped(scope, |g| {
            let mut acc = parts[0].clone();
            for p in &parts[1..] {
                acc = self.op(g, OpKind::Add, &[&acc, p])?;
            }
            Ok::<_, GraphError>(acc)
        })?;
        self.totals.insert(t, sum.clone());
        Ok(Some(sum))
    }

    fn zeros(&mut self, g: &mut Graph, like: &TensorRef) -> Grad {
        match like.shape.to_concrete() {
            Some(dims) => self.emit(
                g,
                OpKind::Const,
                &[],
                Attrs::new().with("value", TensorValue::zeros(like.dtype, &dims)),
            ),
            None => self.op(g, OpKind::ZerosLike, &[like]),
        }
    }

    /// Sums a broadcast gradient back down to the shape of the operand it
    /// belongs to.
    fn reduce_to(&mut self, g: &mut Graph, grad: TensorRef, shape: &Shape) -> Grad {
        let (gr, r) = (grad.shape.rank(), shape.rank());
        if gr == r {
            return Ok(grad);
        }
        let axes: Vec<i64> = match (gr, r) {
            (_, 0) => Vec::new(),
            (2, 1) => vec![0],
            _ => {
                return Err(GraphError::Invalid(format!(
                    "cannot reduce gradient of shape {} to {shape}",
                    grad.shape
                )))
            }
        };
        self.emit(g, OpKind::ReduceSum, &[&grad], Attrs::new().with("axes", axes))
    }

    fn matmul(&mut self, g: &mut Graph, a: &TensorRef, b: &TensorRef, ta: bool, tb: bool) -> Grad {
        let mut attrs = Attrs::new();
        if ta {
            attrs.set("transpose_a", true);
        }
        if tb {
            attrs.set("transpose_b", true);
        }
        self.emit(g, OpKind::MatMul, &[a, b], attrs)
    }

    /// Per-input gradients of one node; `None` where not requested.
    fn rule(
        &mut self,
        g: &mut Graph,
        node: &Node,
        dys: &[Option<TensorRef>],
        wanted: &[bool],
    ) -> Result<Vec<Option<TensorRef>>, GraphError> {
        use OpKind::*;
        let ins = &node.inputs;
        let y = |k: usize| node.output(k);
        let mut out: Vec<Option<TensorRef>> = vec![None; ins.len()];

        if node.kind == Switch {
            // a branch that produced no gradient contributes zeros
            let mut g01 = Vec::with_capacity(2);
            for (k, dy) in dys.iter().enumerate() {
                g01.push(match dy {
                    Some(d) => d.clone(),
                    None => self.op(g, ZerosLike, &[&y(k)])?,
                });
            }
            if wanted[0] {
                out[0] = Some(self.op(g, Merge, &[&g01[0], &g01[1], &ins[1]])?);
            }
            return Ok(out);
        }

        let dy = dys[0].clone().expect("single-output node with a gradient");
        match node.kind {
            Add | Sub => {
                if wanted[0] {
                    out[0] = Some(self.reduce_to(g, dy.clone(), &ins[0].shape)?);
                }
                if wanted[1] {
                    let d = if node.kind == Sub { self.op(g, Neg, &[&dy])? } else { dy };
                    out[1] = Some(self.reduce_to(g, d, &ins[1].shape)?);
                }
            }
            Mul => {
                if wanted[0] {
                    let d = self.op(g, Mul, &[&dy, &ins[1]])?;
                    out[0] = Some(self.reduce_to(g, d, &ins[0].shape)?);
                }
                if wanted[1] {
                    let d = self.op(g, Mul, &[&dy, &ins[0]])?;
                    out[1] = Some(self.reduce_to(g, d, &ins[1].shape)?);
                }
            }
            MatMul => {
                let (a, b) = (&ins[0], &ins[1]);
                let ta = node.attrs.flag("transpose_a");
                let tb = node.attrs.flag("transpose_b");
                if wanted[0] {
                    out[0] = Some(match (ta, tb) {
                        (false, false) => self.matmul(g, &dy, b, false, true)?,
                        (false, true) => self.matmul(g, &dy, b, false, false)?,
                        (true, false) => self.matmul(g, b, &dy, false, true)?,
                        (true, true) => self.matmul(g, b, &dy, true, true)?,
                    });
                }
                if wanted[1] {
                    out[1] = Some(match (ta, tb) {
                        (false, false) => self.matmul(g, a, &dy, true, false)?,
                        (false, true) => self.matmul(g, &dy, a, true, false)?,
                        (true, false) => self.matmul(g, a, &dy, false, false)?,
                        (true, true) => self.matmul(g, &dy, a, true, true)?,
                    });
                }
            }
            Exp => out[0] = Some(self.op(g, Mul, &[&dy, &y(0)])?),
            Log => {
                let r = self.op(g, Reciprocal, &[&ins[0]])?;
                out[0] = Some(self.op(g, Mul, &[&dy, &r])?);
            }
            Neg => out[0] = Some(self.op(g, Neg, &[&dy])?),
            Sigmoid => {
                let d = self.op(g, SigmoidDeriv, &[&y(0)])?;
                out[0] = Some(self.op(g, Mul, &[&dy, &d])?);
            }
            Relu => {
                let d = self.op(g, ReluDeriv, &[&ins[0]])?;
                out[0] = Some(self.op(g, Mul, &[&dy, &d])?);
            }
            Softmax => out[0] = Some(self.op(g, SoftmaxGrad, &[&y(0), &dy])?),
            ReduceSum | ReduceMean => {
                let kind = if node.kind == ReduceSum { SumGrad } else { MeanGrad };
                let axes = node.attrs.ints("axes").unwrap_or(&[]).to_vec();
                out[0] = Some(self.emit(g, kind, &[&dy, &ins[0]], Attrs::new().with("axes", axes))?);
            }
            Assign => out[1] = Some(dy),
            Merge => {
                let branches = self.emit_all(g, Switch, &[&dy, &ins[2]], Attrs::new())?;
                out[0] = Some(branches[0].clone());
                out[1] = Some(branches[1].clone());
            }
            other => {
                return Err(GraphError::Invalid(format!("no gradient rule for {other}")));
            }
        }
        Ok(out)
    }
}
