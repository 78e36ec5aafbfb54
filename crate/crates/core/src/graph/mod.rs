//! Computational graphs: operation nodes joined by symbolic tensor edges.
//!
//! A [`Graph`] is built incrementally through [`Graph::add_node`] or the
//! typed helpers in [`ops`]. Node ids are dense and assigned in insertion
//! order, and every input must already exist when a node is added, so a
//! graph built through this API is acyclic by construction. Once a graph is
//! handed to a session it is frozen and further mutation is rejected.

pub mod infer;
pub mod op;
pub mod ops;
mod serialize;

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};
use std::fmt;

use serde::{Deserialize, Serialize};

pub use op::{Arity, AttrValue, Attrs, OpKind};
pub use ops::Variable;
pub use serialize::{deserialize, serialize, FORMAT_VERSION};

use crate::tensor::{DType, Shape};

/// Collection holding the Assign node of every variable's initializer.
pub const VARIABLE_INITIALIZERS: &str = "variable_initializers";
/// Collection holding variable nodes updated by optimizers.
pub const TRAINABLE_VARIABLES: &str = "trainable_variables";
/// Collection holding summary nodes for `merge_all`.
pub const SUMMARIES: &str = "summaries";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub usize);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Identity of one node output, without type information.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TensorId {
    pub node: NodeId,
    pub index: usize,
}

impl fmt::Display for TensorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.node, self.index)
    }
}

/// Declared type of a node output.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TensorSpec {
    pub dtype: DType,
    pub shape: Shape,
}

/// Symbolic handle to one output of a node. It never holds data.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TensorRef {
    pub node: NodeId,
    pub index: usize,
    pub dtype: DType,
    pub shape: Shape,
}

impl TensorRef {
    pub fn id(&self) -> TensorId {
        TensorId {
            node: self.node,
            index: self.index,
        }
    }
}

impl From<&TensorRef> for TensorId {
    fn from(t: &TensorRef) -> Self {
        t.id()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub kind: OpKind,
    pub name: String,
    pub inputs: Vec<TensorRef>,
    pub control_inputs: BTreeSet<NodeId>,
    pub attrs: Attrs,
    pub device: Option<String>,
    pub outputs: Vec<TensorSpec>,
}

impl Node {
    pub fn output(&self, index: usize) -> TensorRef {
        let spec = &self.outputs[index];
        TensorRef {
            node: self.id,
            index,
            dtype: spec.dtype,
            shape: spec.shape.clone(),
        }
    }

    pub fn output_refs(&self) -> Vec<TensorRef> {
        (0..self.outputs.len()).map(|i| self.output(i)).collect()
    }

    /// Data inputs with their positions, skipping reference edges.
    pub fn data_inputs(&self) -> impl Iterator<Item = (usize, &TensorRef)> {
        self.inputs
            .iter()
            .enumerate()
            .filter(|(i, _)| !self.kind.is_ref_input(*i))
    }

    /// Producers this node must wait for: data inputs plus control inputs.
    pub fn dependencies(&self) -> BTreeSet<NodeId> {
        let mut deps: BTreeSet<NodeId> = self.inputs.iter().map(|t| t.node).collect();
        deps.extend(self.control_inputs.iter().copied());
        deps
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("{kind} takes {expected} inputs, got {got}")]
    ArityMismatch { kind: OpKind, expected: String, got: usize },
    #[error("{kind}: {detail}")]
    DTypeMismatch { kind: OpKind, detail: String },
    #[error("{kind}: incompatible shapes: {detail}")]
    ShapeIncompatible { kind: OpKind, detail: String },
    #[error("duplicate node name {0:?}")]
    DuplicateName(String),
    #[error("graph contains a cycle")]
    CycleDetected,
    #[error("variable initializer must have a fully known shape, got {0}")]
    DynamicShapeInitializer(String),
    #[error("node {node} references missing tensor {input}")]
    DanglingInput { node: NodeId, input: TensorId },
    #[error("unknown op kind {0:?}")]
    UnknownOpKind(String),
    #[error("malformed graph document: {0}")]
    MalformedDocument(String),
    #[error("{kind} is missing attribute {attr:?}")]
    MissingAttr { kind: OpKind, attr: String },
    #[error("{kind}: {detail}")]
    InvalidAttr { kind: OpKind, detail: String },
    #[error("graph is frozen; it was handed to a session")]
    GraphFrozen,
    #[error("scalar summary needs a rank-0 input, got {0}")]
    NonScalarSummaryInput(String),
    #[error("{0}")]
    Invalid(String),
}

/// Everything needed to add one node.
#[derive(Debug, Clone)]
pub struct NodeDef {
    pub kind: OpKind,
    pub inputs: Vec<TensorRef>,
    pub control_inputs: Vec<NodeId>,
    pub attrs: Attrs,
    pub name: Option<String>,
    pub device: Option<String>,
}

impl NodeDef {
    pub fn new(kind: OpKind) -> NodeDef {
        NodeDef {
            kind,
            inputs: Vec::new(),
            control_inputs: Vec::new(),
            attrs: Attrs::new(),
            name: None,
            device: None,
        }
    }

    pub fn input(mut self, t: &TensorRef) -> Self {
        self.inputs.push(t.clone());
        self
    }

    pub fn inputs<'a>(mut self, ts: impl IntoIterator<Item = &'a TensorRef>) -> Self {
        self.inputs.extend(ts.into_iter().cloned());
        self
    }

    pub fn control(mut self, id: NodeId) -> Self {
        self.control_inputs.push(id);
        self
    }

    pub fn controls(mut self, ids: impl IntoIterator<Item = NodeId>) -> Self {
        self.control_inputs.extend(ids);
        self
    }

    pub fn attr(mut self, key: &str, value: impl Into<AttrValue>) -> Self {
        self.attrs.set(key, value);
        self
    }

    pub fn attrs(mut self, attrs: Attrs) -> Self {
        self.attrs = attrs;
        self
    }

    pub fn name(mut self, name: impl Into<String>) -> Self {
        self.name = Some(name.into());
        self
    }

    pub fn device(mut self, device: impl Into<String>) -> Self {
        self.device = Some(device.into());
        self
    }
}

/// One registered variable: its state node, the producer of its initial
/// value and the Assign that initializes it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VariableEntry {
    pub variable: NodeId,
    pub initial: NodeId,
    pub initializer: NodeId,
}

#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: BTreeMap<NodeId, Node>,
    names: BTreeMap<String, NodeId>,
    collections: BTreeMap<String, Vec<NodeId>>,
    scopes: Vec<String>,
    device_scope: Option<String>,
    next_id: usize,
    frozen: bool,
}

impl PartialEq for Graph {
    fn eq(&self, other: &Self) -> bool {
        self.nodes == other.nodes && self.collections == other.collections
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(&id)
    }

    /// Panicking lookup for ids known to come from this graph.
    pub fn expect_node(&self, id: NodeId) -> &Node {
        self.nodes
            .get(&id)
            .unwrap_or_else(|| panic!("node {id} is not in this graph"))
    }

    pub fn node_by_name(&self, name: &str) -> Option<&Node> {
        self.names.get(name).and_then(|id| self.nodes.get(id))
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.nodes.values()
    }

    pub fn node_ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes.keys().copied()
    }

    pub fn output(&self, id: NodeId, index: usize) -> TensorRef {
        self.expect_node(id).output(index)
    }

    pub fn tensor(&self, id: TensorId) -> Option<TensorRef> {
        let node = self.nodes.get(&id.node)?;
        (id.index < node.outputs.len()).then(|| node.output(id.index))
    }

    pub fn collection(&self, tag: &str) -> &[NodeId] {
        self.collections.get(tag).map_or(&[], Vec::as_slice)
    }

    pub fn collections(&self) -> &BTreeMap<String, Vec<NodeId>> {
        &self.collections
    }

    pub fn add_to_collection(&mut self, tag: &str, id: NodeId) {
        let list = self.collections.entry(tag.to_string()).or_default();
        if !list.contains(&id) {
            list.push(id);
        }
    }

    /// The variable registry, rebuilt from the initializer collection.
    pub fn variables(&self) -> Vec<VariableEntry> {
        self.collection(VARIABLE_INITIALIZERS)
            .iter()
            .filter_map(|&assign| {
                let node = self.nodes.get(&assign)?;
                Some(VariableEntry {
                    variable: node.inputs.first()?.node,
                    initial: node.inputs.get(1)?.node,
                    initializer: assign,
                })
            })
            .collect()
    }

    pub fn trainable_variables(&self) -> Vec<TensorRef> {
        self.collection(TRAINABLE_VARIABLES)
            .iter()
            .map(|&id| self.output(id, 0))
            .collect()
    }

    // -- name scopes --------------------------------------------------------

    pub fn push_scope(&mut self, name: &str) {
        self.scopes.push(name.to_string());
    }

    pub fn pop_scope(&mut self) {
        self.scopes.pop();
    }

    /// Runs `f` with `name` appended to the current name scope.
    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Graph) -> R) -> R {
        self.push_scope(name);
        let out = f(self);
        self.pop_scope();
        out
    }

    /// Runs `f` with `device` as the constraint of every node it creates
    /// that does not name its own.
    pub fn on_device<R>(&mut self, device: &str, f: impl FnOnce(&mut Graph) -> R) -> R {
        let outer = self.device_scope.replace(device.to_string());
        let out = f(self);
        self.device_scope = outer;
        out
    }

    pub fn current_scope(&self) -> String {
        self.scopes.join("/")
    }

    fn unique_name(&self, base: &str) -> String {
        let prefix = self.current_scope();
        let full = if prefix.is_empty() {
            base.to_string()
        } else {
            format!("{prefix}/{base}")
        };
        if !self.names.contains_key(&full) {
            return full;
        }
        (1..)
            .map(|i| format!("{full}_{i}"))
            .find(|n| !self.names.contains_key(n))
            .expect("unbounded suffix search")
    }

    // -- construction -------------------------------------------------------

    /// Adds a node and returns a handle for each declared output.
    pub fn add_node(&mut self, def: NodeDef) -> Result<Vec<TensorRef>, GraphError> {
        let id = self.insert(def)?;
        Ok(self.expect_node(id).output_refs())
    }

    /// Adds a node and returns its id.
    pub fn insert(&mut self, def: NodeDef) -> Result<NodeId, GraphError> {
        if self.frozen {
            return Err(GraphError::GraphFrozen);
        }
        self.insert_unfrozen(def)
    }

    /// Insertion used by passes that rewrite a private copy of a frozen graph.
    pub(crate) fn insert_unfrozen(&mut self, def: NodeDef) -> Result<NodeId, GraphError> {
        let id = NodeId(self.next_id);
        self.check_references(id, &def.inputs, &def.control_inputs)?;
        let outputs = self.infer_node(def.kind, &def.inputs, &def.attrs)?;
        let base = def.name.as_deref().unwrap_or(def.kind.as_str());
        let name = self.unique_name(base);
        let node = Node {
            id,
            kind: def.kind,
            name: name.clone(),
            inputs: def.inputs,
            control_inputs: def.control_inputs.into_iter().collect(),
            attrs: def.attrs,
            device: def.device.or_else(|| self.device_scope.clone()),
            outputs,
        };
        self.names.insert(name, id);
        self.nodes.insert(id, node);
        self.next_id += 1;
        Ok(id)
    }

    fn check_references(&self, id: NodeId, inputs: &[TensorRef], control: &[NodeId]) -> Result<(), GraphError> {
        for t in inputs {
            let ok = self.nodes.get(&t.node).is_some_and(|n| t.index < n.outputs.len());
            if !ok {
                return Err(GraphError::DanglingInput {
                    node: id,
                    input: t.id(),
                });
            }
        }
        for c in control {
            if !self.nodes.contains_key(c) {
                return Err(GraphError::DanglingInput {
                    node: id,
                    input: TensorId { node: *c, index: 0 },
                });
            }
        }
        Ok(())
    }

    /// Inference plus checks that need to see producers.
    fn infer_node(&self, kind: OpKind, inputs: &[TensorRef], attrs: &Attrs) -> Result<Vec<TensorSpec>, GraphError> {
        let outputs = infer::infer(kind, inputs, attrs)?;
        if kind == OpKind::Assign {
            let target = self.expect_node(inputs[0].node);
            if target.kind != OpKind::Variable {
                return Err(GraphError::Invalid(format!(
                    "Assign target {} is a {}, not a Variable",
                    target.name, target.kind
                )));
            }
        }
        Ok(outputs)
    }

    /// Kahn's algorithm over data and control edges, lowest id first among
    /// ready nodes.
    pub fn topological_order(&self) -> Result<Vec<NodeId>, GraphError> {
        let mut indegree: BTreeMap<NodeId, usize> = BTreeMap::new();
        let mut consumers: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
        for node in self.nodes.values() {
            let deps = node.dependencies();
            indegree.insert(node.id, deps.len());
            for d in deps {
                consumers.entry(d).or_default().push(node.id);
            }
        }
        let mut ready: BinaryHeap<Reverse<NodeId>> = indegree
            .iter()
            .filter(|(_, &d)| d == 0)
            .map(|(&id, _)| Reverse(id))
            .collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        while let Some(Reverse(id)) = ready.pop() {
            order.push(id);
            for &c in consumers.get(&id).map_or(&[][..], Vec::as_slice) {
                let d = indegree.get_mut(&c).expect("consumer registered");
                *d -= 1;
                if *d == 0 {
                    ready.push(Reverse(c));
                }
            }
        }
        if order.len() != self.nodes.len() {
            return Err(GraphError::CycleDetected);
        }
        Ok(order)
    }

    /// Nodes consuming each node's outputs or depending on it by control edge.
    pub fn consumers(&self) -> BTreeMap<NodeId, BTreeSet<NodeId>> {
        let mut out: BTreeMap<NodeId, BTreeSet<NodeId>> = BTreeMap::new();
        for node in self.nodes.values() {
            for d in node.dependencies() {
                out.entry(d).or_default().insert(node.id);
            }
        }
        out
    }

    /// Nodes from which `targets` are reachable, including the targets.
    pub fn ancestors(&self, targets: impl IntoIterator<Item = NodeId>) -> BTreeSet<NodeId> {
        let mut seen = BTreeSet::new();
        let mut stack: Vec<NodeId> = targets.into_iter().collect();
        while let Some(id) = stack.pop() {
            if !seen.insert(id) {
                continue;
            }
            if let Some(node) = self.nodes.get(&id) {
                stack.extend(node.dependencies());
            }
        }
        seen
    }

    // -- raw access for passes ----------------------------------------------

    /// Rebuilds a graph from already-validated nodes. Used by deserialization
    /// and passes that rewrite node lists wholesale.
    pub(crate) fn from_parts(nodes: BTreeMap<NodeId, Node>, collections: BTreeMap<String, Vec<NodeId>>) -> Graph {
        let names = nodes.values().map(|n| (n.name.clone(), n.id)).collect();
        let next_id = nodes.keys().next_back().map_or(0, |id| id.0 + 1);
        Graph {
            nodes,
            names,
            collections,
            scopes: Vec::new(),
            device_scope: None,
            next_id,
            frozen: false,
        }
    }

    pub(crate) fn into_parts(self) -> (BTreeMap<NodeId, Node>, BTreeMap<String, Vec<NodeId>>) {
        (self.nodes, self.collections)
    }

    pub(crate) fn node_mut(&mut self, id: NodeId) -> Option<&mut Node> {
        self.nodes.get_mut(&id)
    }
}
