//! Common subgraph elimination.

use std::collections::{BTreeMap, HashMap};

use crate::graph::{Graph, NodeId, TensorRef};

/// Which nodes were folded into which survivors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CseReport {
    /// `(removed, survivor)` pairs in removal order.
    pub merged: Vec<(NodeId, NodeId)>,
}

impl CseReport {
    pub fn merged_count(&self) -> usize {
        self.merged.len()
    }

    /// The node that now computes what `id` computed before the pass.
    pub fn resolve(&self, id: NodeId) -> NodeId {
        self.merged
            .iter()
            .find(|(removed, _)| *removed == id)
            .map_or(id, |&(_, survivor)| survivor)
    }

    pub fn resolve_tensor(&self, t: &TensorRef) -> TensorRef {
        TensorRef {
            node: self.resolve(t.node),
            ..t.clone()
        }
    }
}

/// Merges stateless nodes that agree on kind, attributes, ordered inputs,
/// control inputs and device constraint. The lowest id of each class
/// survives and consumers are redirected to it. Runs to a fixpoint; the
/// input graph is left untouched.
pub fn eliminate_common_subgraphs(graph: &Graph) -> (Graph, CseReport) {
    let mut current = graph.clone();
    let mut report = CseReport::default();
    loop {
        let step = one_pass(&current);
        if step.is_empty() {
            break;
        }
        current = rebuild(&current, &step);
        // earlier removals that pointed at a node removed now follow it
        for (_, survivor) in report.merged.iter_mut() {
            if let Some(&s) = step.get(survivor) {
                *survivor = s;
            }
        }
        report.merged.extend(step);
    }
    if graph.is_frozen() {
        current.freeze();
    }
    (current, report)
}

/// One sweep in topological order. Returns removed id -> survivor id.
fn one_pass(graph: &Graph) -> BTreeMap<NodeId, NodeId> {
    let order = graph
        .topological_order()
        .expect("graphs built through the API are acyclic");
    // representative: the first member of a class seen in the sweep
    let mut rep: HashMap<NodeId, NodeId> = HashMap::new();
    let mut by_key: HashMap<String, NodeId> = HashMap::new();
    let mut classes: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    for id in order {
        let node = graph.expect_node(id);
        if node.kind.is_stateful() {
            continue;
        }
        let r = |n: NodeId| *rep.get(&n).unwrap_or(&n);
        let inputs: Vec<String> = node
            .inputs
            .iter()
            .map(|t| format!("{}:{}", r(t.node), t.index))
            .collect();
        let mut control: Vec<NodeId> = node.control_inputs.iter().map(|&c| r(c)).collect();
        control.sort();
        control.dedup();
        let key = format!(
            "{}|{}|{}|{:?}|{:?}",
            node.kind,
            node.attrs.canonical(),
            inputs.join(","),
            control,
            node.device
        );
        match by_key.get(&key) {
            Some(&first) => {
                rep.insert(id, first);
                classes.entry(first).or_default().push(id);
            }
            None => {
                by_key.insert(key, id);
                classes.insert(id, vec![id]);
            }
        }
    }
    let mut removed = BTreeMap::new();
    for members in classes.values() {
        let survivor = *members.iter().min().expect("classes are nonempty");
        for &m in members {
            if m != survivor {
                removed.insert(m, survivor);
            }
        }
    }
    removed
}

fn rebuild(graph: &Graph, removed: &BTreeMap<NodeId, NodeId>) -> Graph {
    let map = |id: NodeId| *removed.get(&id).unwrap_or(&id);
    let (nodes, collections) = graph.clone().into_parts();
    let nodes = nodes
        .into_iter()
        .filter(|(id, _)| !removed.contains_key(id))
        .map(|(id, mut node)| {
            for t in node.inputs.iter_mut() {
                t.node = map(t.node);
            }
            node.control_inputs = node.control_inputs.iter().map(|&c| map(c)).collect();
            (id, node)
        })
        .collect();
    let collections = collections
        .into_iter()
        .map(|(tag, ids)| {
            let mut out: Vec<NodeId> = Vec::with_capacity(ids.len());
            for id in ids.into_iter().map(map) {
                if !out.contains(&id) {
                    out.push(id);
                }
            }
            (tag, out)
        })
        .collect();
    Graph::from_parts(nodes, collections)
}

/// Nodes that compute something: everything except constants, placeholders
/// and variables.
pub fn compute_node_count(graph: &Graph) -> usize {
    use crate::graph::OpKind::*;
    graph
        .nodes()
        .filter(|n| !matches!(n.kind, Const | Placeholder | Variable))
        .count()
}
