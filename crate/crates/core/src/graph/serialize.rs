//! JSON graph documents.
//!
//! Layout: `{"collections":{..},"nodes":[{"attrs","control","device","id",
//! "inputs":[[producer,index],..],"kind","name"}],"version":1}` with every
//! object's keys sorted, so equal graphs serialize to identical bytes.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{infer, Attrs, Graph, GraphError, Node, NodeId, OpKind, TensorId};

pub const FORMAT_VERSION: u64 = 1;

#[derive(Serialize, Deserialize)]
struct Document {
    version: u64,
    nodes: Vec<DocNode>,
    #[serde(default)]
    collections: BTreeMap<String, Vec<NodeId>>,
}

#[derive(Serialize, Deserialize)]
struct DocNode {
    id: NodeId,
    name: String,
    kind: String,
    #[serde(default)]
    inputs: Vec<(NodeId, usize)>,
    #[serde(default)]
    control: Vec<NodeId>,
    #[serde(default)]
    attrs: Attrs,
    #[serde(default)]
    device: Option<String>,
}

pub fn serialize(graph: &Graph) -> Vec<u8> {
    let doc = Document {
        version: FORMAT_VERSION,
        nodes: graph
            .nodes()
            .map(|n| DocNode {
                id: n.id,
                name: n.name.clone(),
                kind: n.kind.as_str().to_string(),
                inputs: n.inputs.iter().map(|t| (t.node, t.index)).collect(),
                control: n.control_inputs.iter().copied().collect(),
                attrs: n.attrs.clone(),
                device: n.device.clone(),
            })
            .collect(),
        collections: graph.collections().clone(),
    };
    // round through Value so struct fields come out in sorted key order
    let value = serde_json::to_value(&doc).expect("graph documents are always representable");
    let mut bytes = serde_json::to_vec_pretty(&value).expect("value serialization cannot fail");
    bytes.push(b'\n');
    bytes
}

pub fn deserialize(bytes: &[u8]) -> Result<Graph, GraphError> {
    let value: serde_json::Value =
        serde_json::from_slice(bytes).map_err(|e| GraphError::MalformedDocument(e.to_string()))?;
    // kind strings are checked before the typed parse so an unknown kind is
    // reported as such rather than as a generic schema error
    if let Some(nodes) = value.get("nodes").and_then(|n| n.as_array()) {
        for n in nodes {
            if let Some(kind) = n.get("kind").and_then(|k| k.as_str()) {
                if kind.parse::<OpKind>().is_err() {
                    return Err(GraphError::UnknownOpKind(kind.to_string()));
                }
            }
        }
    }
    let doc: Document = serde_json::from_value(value).map_err(|e| GraphError::MalformedDocument(e.to_string()))?;
    if doc.version != FORMAT_VERSION {
        return Err(GraphError::MalformedDocument(format!(
            "unsupported version {}",
            doc.version
        )));
    }

    let mut defs: BTreeMap<NodeId, (DocNode, OpKind)> = BTreeMap::new();
    let mut names = BTreeSet::new();
    for n in doc.nodes {
        let kind: OpKind = n.kind.parse().map_err(GraphError::UnknownOpKind)?;
        if !names.insert(n.name.clone()) {
            return Err(GraphError::DuplicateName(n.name));
        }
        let id = n.id;
        if defs.insert(id, (n, kind)).is_some() {
            return Err(GraphError::MalformedDocument(format!("duplicate node id {id}")));
        }
    }
    for (id, (n, _)) in &defs {
        for &(p, index) in &n.inputs {
            if !defs.contains_key(&p) {
                return Err(GraphError::DanglingInput {
                    node: *id,
                    input: TensorId { node: p, index },
                });
            }
        }
        for &c in &n.control {
            if !defs.contains_key(&c) {
                return Err(GraphError::DanglingInput {
                    node: *id,
                    input: TensorId { node: c, index: 0 },
                });
            }
        }
    }

    let order = document_order(&defs)?;
    let mut nodes: BTreeMap<NodeId, Node> = BTreeMap::new();
    for id in order {
        let (n, kind) = defs.remove(&id).expect("ordered ids come from defs");
        let mut inputs = Vec::with_capacity(n.inputs.len());
        for &(p, index) in &n.inputs {
            let producer = &nodes[&p];
            if index >= producer.outputs.len() {
                return Err(GraphError::DanglingInput {
                    node: id,
                    input: TensorId { node: p, index },
                });
            }
            inputs.push(producer.output(index));
        }
        let outputs = infer::infer(kind, &inputs, &n.attrs)?;
        if kind == OpKind::Assign && nodes[&inputs[0].node].kind != OpKind::Variable {
            return Err(GraphError::Invalid(format!(
                "Assign {} does not target a Variable",
                n.name
            )));
        }
        nodes.insert(
            id,
            Node {
                id,
                kind,
                name: n.name,
                inputs,
                control_inputs: n.control.into_iter().collect(),
                attrs: n.attrs,
                device: n.device,
                outputs,
            },
        );
    }
    for (tag, ids) in &doc.collections {
        if let Some(id) = ids.iter().find(|id| !nodes.contains_key(id)) {
            return Err(GraphError::MalformedDocument(format!(
                "collection {tag:?} names missing node {id}"
            )));
        }
    }
    Ok(Graph::from_parts(nodes, doc.collections))
}

fn document_order(defs: &BTreeMap<NodeId, (DocNode, OpKind)>) -> Result<Vec<NodeId>, GraphError> {
    let mut indegree: BTreeMap<NodeId, usize> = BTreeMap::new();
    let mut consumers: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    for (&id, (n, _)) in defs {
        let deps: BTreeSet<NodeId> = n
            .inputs
            .iter()
            .map(|&(p, _)| p)
            .chain(n.control.iter().copied())
            .collect();
        indegree.insert(id, deps.len());
        for d in deps {
            consumers.entry(d).or_default().push(id);
        }
    }
    let mut ready: BTreeSet<NodeId> = indegree.iter().filter(|(_, &d)| d == 0).map(|(&id, _)| id).collect();
    let mut order = Vec::with_capacity(defs.len());
    while let Some(id) = ready.pop_first() {
        order.push(id);
        for c in consumers.get(&id).into_iter().flatten() {
            let d = indegree.get_mut(c).expect("registered");
            *d -= 1;
            if *d == 0 {
                ready.insert(*c);
            }
        }
    }
    if order.len() != defs.len() {
        return Err(GraphError::CycleDetected);
    }
    Ok(order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{DType, Shape, TensorValue};

    fn sample() -> Graph {
        let mut g = Graph::new();
        let x = g
            .placeholder(DType::F32, Shape::from_opt(&[None, Some(4)]), "x")
            .unwrap();
        let w = g.variable(TensorValue::filled(DType::F32, &[4, 3], 0.5), "w").unwrap();
        let y = g.matmul(&x, &w.var).unwrap();
        let s = g.softmax(&y).unwrap();
        g.reduce_sum(&s, &[1]).unwrap();
        g.initialize_all_variables().unwrap();
        g
    }

    #[test]
    fn round_trip_is_lossless_and_stable() {
        let g = sample();
        let bytes = serialize(&g);
        let back = deserialize(&bytes).unwrap();
        assert_eq!(back, g);
        assert_eq!(serialize(&back), bytes);
    }

    #[test]
    fn unknown_kind_is_reported() {
        let doc = br#"{"version":1,"nodes":[{"id":0,"name":"c","kind":"Conv9D"}],"collections":{}}"#;
        assert_eq!(deserialize(doc), Err(GraphError::UnknownOpKind("Conv9D".into())));
    }

    #[test]
    fn dangling_input_is_reported() {
        let doc = br#"{"version":1,"nodes":[{"id":0,"name":"n","kind":"Neg","inputs":[[7,0]]}]}"#;
        assert!(matches!(deserialize(doc), Err(GraphError::DanglingInput { .. })));
    }

    #[test]
    fn cycles_are_rejected() {
        let doc = br#"{"version":1,"nodes":[
            {"id":0,"name":"a","kind":"NoOp","control":[1]},
            {"id":1,"name":"b","kind":"NoOp","control":[0]}]}"#;
        assert_eq!(deserialize(doc), Err(GraphError::CycleDetected));
    }

    #[test]
    fn garbage_is_malformed() {
        assert!(matches!(deserialize(b"{nope"), Err(GraphError::MalformedDocument(_))));
        assert!(matches!(
            deserialize(br#"{"version":2,"nodes":[]}"#),
            Err(GraphError::MalformedDocument(_))
        ));
    }

    #[test]
    fn keys_are_sorted() {
        let text = String::from_utf8(serialize(&sample())).unwrap();
        let c = text.find("\"collections\"").unwrap();
        let n = text.find("\"nodes\"").unwrap();
        let v = text.find("\"version\"").unwrap();
        assert!(c < n && n < v);
    }
}
