//! Typed builder helpers layered over [`Graph::add_node`].

use super::{
    Graph, GraphError, NodeDef, NodeId, OpKind, TensorRef, SUMMARIES, TRAINABLE_VARIABLES, VARIABLE_INITIALIZERS,
};
use crate::graph::op::Attrs;
use crate::tensor::{DType, Shape, TensorValue};

/// Handles produced by creating a variable.
#[derive(Debug, Clone, PartialEq)]
pub struct Variable {
    /// Reads the variable's current value.
    pub var: TensorRef,
    /// Producer of the initial value.
    pub initial: NodeId,
    /// The Assign node that writes the initial value.
    pub initializer: NodeId,
    /// Output of the initializer: the variable's value right after initialization.
    pub initialized_value: TensorRef,
}

impl Variable {
    pub fn id(&self) -> NodeId {
        self.var.node
    }
}

type Built = Result<TensorRef, GraphError>;

impl Graph {
    fn single(&mut self, def: NodeDef) -> Built {
        let mut outs = self.add_node(def)?;
        Ok(outs.remove(0))
    }

    pub fn unary(&mut self, kind: OpKind, x: &TensorRef) -> Built {
        self.single(NodeDef::new(kind).input(x))
    }

    pub fn binary(&mut self, kind: OpKind, a: &TensorRef, b: &TensorRef) -> Built {
        self.single(NodeDef::new(kind).input(a).input(b))
    }

    pub fn constant(&mut self, value: TensorValue) -> Built {
        self.single(NodeDef::new(OpKind::Const).attr("value", value))
    }

    pub fn constant_named(&mut self, value: TensorValue, name: &str) -> Built {
        self.single(NodeDef::new(OpKind::Const).attr("value", value).name(name))
    }

    pub fn scalar(&mut self, dtype: DType, value: f64) -> Built {
        self.constant(TensorValue::scalar(dtype, value))
    }

    pub fn placeholder(&mut self, dtype: DType, shape: Shape, name: &str) -> Built {
        self.single(
            NodeDef::new(OpKind::Placeholder)
                .attr("dtype", dtype)
                .attr("shape", shape)
                .name(name),
        )
    }

    /// Creates a trainable variable initialized from a constant: adds the
    /// constant, the variable node and the initializing Assign.
    pub fn variable(&mut self, initial: TensorValue, name: &str) -> Result<Variable, GraphError> {
        self.variable_with(Init::Value(initial), name, true)
    }

    /// Creates a variable whose initial value comes from an existing tensor,
    /// for example another variable's `initialized_value`.
    pub fn variable_from(&mut self, initial: &TensorRef, name: &str) -> Result<Variable, GraphError> {
        self.variable_with(Init::Tensor(initial.clone()), name, true)
    }

    pub fn variable_untrainable(&mut self, initial: TensorValue, name: &str) -> Result<Variable, GraphError> {
        self.variable_with(Init::Value(initial), name, false)
    }

    fn variable_with(&mut self, init: Init, name: &str, trainable: bool) -> Result<Variable, GraphError> {
        if self.is_frozen() {
            return Err(GraphError::GraphFrozen);
        }
        let (dtype, shape) = match &init {
            Init::Value(v) => (v.dtype(), Shape::known(v.dims())),
            Init::Tensor(t) => (t.dtype, t.shape.clone()),
        };
        if !shape.is_concrete() {
            return Err(GraphError::DynamicShapeInitializer(shape.to_string()));
        }
        // the suffixed leaf name becomes the scope for the helper nodes
        let full = self.unique_name(name);
        let leaf = full.rsplit('/').next().unwrap_or(name).to_string();
        let initial = match init {
            Init::Value(v) => self.scoped(&leaf, |g| g.constant_named(v, "initial_value"))?,
            Init::Tensor(t) => t,
        };
        let var = self.single(
            NodeDef::new(OpKind::Variable)
                .attr("dtype", dtype)
                .attr("shape", shape.clone())
                .attr("trainable", trainable)
                .name(&leaf),
        )?;
        let assigned = self.scoped(&leaf, |g| {
            g.single(NodeDef::new(OpKind::Assign).input(&var).input(&initial).name("Assign"))
        })?;
        self.add_to_collection(VARIABLE_INITIALIZERS, assigned.node);
        if trainable {
            self.add_to_collection(TRAINABLE_VARIABLES, var.node);
        }
        Ok(Variable {
            initial: initial.node,
            initializer: assigned.node,
            initialized_value: assigned,
            var,
        })
    }

    pub fn assign(&mut self, var: &TensorRef, value: &TensorRef) -> Built {
        self.binary(OpKind::Assign, var, value)
    }

    /// A NoOp whose control inputs are every registered variable initializer.
    pub fn initialize_all_variables(&mut self) -> Result<NodeId, GraphError> {
        let inits: Vec<NodeId> = self.variables().iter().map(|v| v.initializer).collect();
        self.insert(NodeDef::new(OpKind::NoOp).controls(inits).name("init"))
    }

    /// A NoOp that runs after all of `deps`.
    pub fn group(&mut self, deps: impl IntoIterator<Item = NodeId>, name: &str) -> Result<NodeId, GraphError> {
        self.insert(NodeDef::new(OpKind::NoOp).controls(deps).name(name))
    }

    pub fn add(&mut self, a: &TensorRef, b: &TensorRef) -> Built {
        self.binary(OpKind::Add, a, b)
    }

    pub fn sub(&mut self, a: &TensorRef, b: &TensorRef) -> Built {
        self.binary(OpKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: &TensorRef, b: &TensorRef) -> Built {
        self.binary(OpKind::Mul, a, b)
    }

    pub fn equal(&mut self, a: &TensorRef, b: &TensorRef) -> Built {
        self.binary(OpKind::Equal, a, b)
    }

    pub fn matmul(&mut self, a: &TensorRef, b: &TensorRef) -> Built {
        self.matmul_t(a, b, false, false)
    }

    pub fn matmul_t(&mut self, a: &TensorRef, b: &TensorRef, transpose_a: bool, transpose_b: bool) -> Built {
        let mut def = NodeDef::new(OpKind::MatMul).input(a).input(b);
        if transpose_a {
            def = def.attr("transpose_a", true);
        }
        if transpose_b {
            def = def.attr("transpose_b", true);
        }
        self.single(def)
    }

    pub fn exp(&mut self, x: &TensorRef) -> Built {
        self.unary(OpKind::Exp, x)
    }

    pub fn log(&mut self, x: &TensorRef) -> Built {
        self.unary(OpKind::Log, x)
    }

    pub fn neg(&mut self, x: &TensorRef) -> Built {
        self.unary(OpKind::Neg, x)
    }

    pub fn sigmoid(&mut self, x: &TensorRef) -> Built {
        self.unary(OpKind::Sigmoid, x)
    }

    pub fn relu(&mut self, x: &TensorRef) -> Built {
        self.unary(OpKind::Relu, x)
    }

    pub fn softmax(&mut self, x: &TensorRef) -> Built {
        self.unary(OpKind::Softmax, x)
    }

    pub fn truncate16(&mut self, x: &TensorRef) -> Built {
        self.unary(OpKind::CastTruncate16, x)
    }

    pub fn zeros_like(&mut self, x: &TensorRef) -> Built {
        self.unary(OpKind::ZerosLike, x)
    }

    pub fn reduce_sum(&mut self, x: &TensorRef, axes: &[i64]) -> Built {
        self.single(NodeDef::new(OpKind::ReduceSum).input(x).attr("axes", axes.to_vec()))
    }

    pub fn reduce_mean(&mut self, x: &TensorRef, axes: &[i64]) -> Built {
        self.single(NodeDef::new(OpKind::ReduceMean).input(x).attr("axes", axes.to_vec()))
    }

    pub fn argmax(&mut self, x: &TensorRef, axis: i64) -> Built {
        self.single(NodeDef::new(OpKind::ArgMax).input(x).attr("axis", axis))
    }

    /// Routes `data` to output 1 when `pred` is nonzero, else to output 0.
    /// The other output is dead for that run.
    pub fn switch(&mut self, data: &TensorRef, pred: &TensorRef) -> Result<(TensorRef, TensorRef), GraphError> {
        let mut outs = self.add_node(NodeDef::new(OpKind::Switch).input(data).input(pred))?;
        let on_true = outs.pop().expect("two outputs");
        let on_false = outs.pop().expect("two outputs");
        Ok((on_false, on_true))
    }

    /// Forwards the branch selected by `pred`.
    pub fn merge(&mut self, on_false: &TensorRef, on_true: &TensorRef, pred: &TensorRef) -> Built {
        self.single(NodeDef::new(OpKind::Merge).input(on_false).input(on_true).input(pred))
    }

    /// Two-way conditional built from Switch/Merge. Each of `inputs` passes
    /// through a Switch; only the branch selected by `pred` at run time executes.
    /// Source nodes created inside a branch, such as constants, are gated on a
    /// pivot so they do not run when their branch is not taken.
    pub fn cond<T, E>(&mut self, pred: &TensorRef, inputs: &[TensorRef], then_branch: T, else_branch: E) -> Built
    where
        T: FnOnce(&mut Graph, &[TensorRef]) -> Built,
        E: FnOnce(&mut Graph, &[TensorRef]) -> Built,
    {
        self.scoped("cond", |g| {
            let mut falses = Vec::with_capacity(inputs.len());
            let mut trues = Vec::with_capacity(inputs.len());
            for x in inputs {
                let (f, t) = g.switch(x, pred)?;
                falses.push(f);
                trues.push(t);
            }
            let (pivot_false, pivot_true) = g.switch(pred, pred)?;
            let on_true = g.scoped("then", |g| {
                let pivot = g.single(NodeDef::new(OpKind::ZerosLike).input(&pivot_true).name("pivot"))?;
                let start = g.next_id;
                let out = then_branch(g, &trues)?;
                g.gate_sources(start, pivot.node);
                Ok::<_, GraphError>(out)
            })?;
            let on_false = g.scoped("else", |g| {
                let pivot = g.single(NodeDef::new(OpKind::ZerosLike).input(&pivot_false).name("pivot"))?;
                let start = g.next_id;
                let out = else_branch(g, &falses)?;
                g.gate_sources(start, pivot.node);
                Ok::<_, GraphError>(out)
            })?;
            g.merge(&on_false, &on_true, pred)
        })
    }

    /// Adds a control edge from `pivot` to every input-free node with id at
    /// least `start`.
    fn gate_sources(&mut self, start: usize, pivot: NodeId) {
        for node in self.nodes.range_mut(NodeId(start)..).map(|(_, n)| n) {
            if node.inputs.is_empty() && node.control_inputs.is_empty() {
                node.control_inputs.insert(pivot);
            }
        }
    }

    /// Row-wise cross entropy `-sum_j labels[i,j] * log(estimates[i,j])`,
    /// composed from Mul, Log, ReduceSum and Neg nodes.
    pub fn cross_entropy_rows(&mut self, labels: &TensorRef, estimates: &TensorRef) -> Built {
        self.scoped("cross_entropy", |g| {
            let log = g.log(estimates)?;
            let prod = g.mul(labels, &log)?;
            let rows = g.reduce_sum(&prod, &[1])?;
            g.neg(&rows)
        })
    }

    pub fn scalar_summary(&mut self, tag: &str, x: &TensorRef) -> Built {
        let s = self.single(NodeDef::new(OpKind::ScalarSummary).input(x).attr("tag", tag))?;
        self.add_to_collection(SUMMARIES, s.node);
        Ok(s)
    }

    pub fn histogram_summary(&mut self, tag: &str, x: &TensorRef) -> Built {
        let s = self.single(NodeDef::new(OpKind::HistogramSummary).input(x).attr("tag", tag))?;
        self.add_to_collection(SUMMARIES, s.node);
        Ok(s)
    }

    /// Concatenates every summary registered so far.
    pub fn merge_all_summaries(&mut self) -> Built {
        let inputs: Vec<TensorRef> = self
            .collection(SUMMARIES)
            .iter()
            .map(|&id| self.output(id, 0))
            .collect();
        self.single(
            NodeDef::new(OpKind::MergeSummaries)
                .inputs(&inputs)
                .name("merged_summaries"),
        )
    }

    /// Generic single-output helper with explicit attributes and name.
    pub fn op(&mut self, kind: OpKind, inputs: &[TensorRef], attrs: Attrs, name: Option<&str>) -> Built {
        let mut def = NodeDef::new(kind).inputs(inputs).attrs(attrs);
        if let Some(n) = name {
            def = def.name(n);
        }
        self.single(def)
    }
}

enum Init {
    Value(TensorValue),
    Tensor(TensorRef),
}
