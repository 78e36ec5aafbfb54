//! Pruning a run to the nodes it needs and ordering them.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use crate::graph::{Graph, NodeId, OpKind, TensorId};

use super::RuntimeError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SchedulePolicy {
    /// Each node runs as late as its consumers allow.
    #[default]
    Alap,
    /// Each node runs as soon as its inputs are ready.
    Asap,
}

/// Dependencies of `id` that must run before it within one run: producers
/// of its non-fed data inputs, its control inputs and, for a Recv, the
/// matching Send.
pub(crate) fn run_dependencies(
    graph: &Graph,
    id: NodeId,
    fed: &HashSet<TensorId>,
    send_of_recv: &HashMap<NodeId, NodeId>,
) -> Vec<NodeId> {
    let node = graph.expect_node(id);
    let mut deps: Vec<NodeId> = node
        .data_inputs()
        .filter(|(_, t)| !fed.contains(&t.id()))
        .map(|(_, t)| t.node)
        .collect();
    deps.extend(node.control_inputs.iter().copied());
    if let Some(&send) = send_of_recv.get(&id) {
        deps.push(send);
    }
    deps.sort();
    deps.dedup();
    deps
}

/// Backward transitive closure from `roots`, with fed tensors cutting off
/// their producers. A Placeholder inside the closure was not fed.
pub fn closure(
    graph: &Graph,
    roots: impl IntoIterator<Item = NodeId>,
    fed: &HashSet<TensorId>,
    send_of_recv: &HashMap<NodeId, NodeId>,
) -> Result<BTreeSet<NodeId>, RuntimeError> {
    let mut seen = BTreeSet::new();
    let mut stack: Vec<NodeId> = roots.into_iter().collect();
    while let Some(id) = stack.pop() {
        if !seen.insert(id) {
            continue;
        }
        let node = graph.expect_node(id);
        if node.kind == OpKind::Placeholder {
            return Err(RuntimeError::MissingFeed(node.name.clone()));
        }
        stack.extend(run_dependencies(graph, id, fed, send_of_recv));
    }
    Ok(seen)
}

/// A dependency-respecting order of `nodes`.
///
/// ALAP sorts by distance from the sinks, longest first, so that every node
/// sits in the latest level its consumers allow; ASAP sorts by distance from
/// the sources. Node id breaks ties in both.
pub fn schedule(
    graph: &Graph,
    nodes: &BTreeSet<NodeId>,
    fed: &HashSet<TensorId>,
    send_of_recv: &HashMap<NodeId, NodeId>,
    policy: SchedulePolicy,
) -> Vec<NodeId> {
    let deps: BTreeMap<NodeId, Vec<NodeId>> = nodes
        .iter()
        .map(|&id| {
            let d = run_dependencies(graph, id, fed, send_of_recv)
                .into_iter()
                .filter(|d| nodes.contains(d))
                .collect();
            (id, d)
        })
        .collect();
    let mut consumers: BTreeMap<NodeId, Vec<NodeId>> = BTreeMap::new();
    for (&id, ds) in &deps {
        for &d in ds {
            consumers.entry(d).or_default().push(id);
        }
    }
    let topo = kahn(&deps, &consumers);
    let key: HashMap<NodeId, usize> = match policy {
        SchedulePolicy::Asap => {
            let mut depth: HashMap<NodeId, usize> = HashMap::new();
            for &id in &topo {
                let d = deps[&id].iter().map(|p| depth[p] + 1).max().unwrap_or(0);
                depth.insert(id, d);
            }
            depth
        }
        SchedulePolicy::Alap => {
            let mut height: HashMap<NodeId, usize> = HashMap::new();
            for &id in topo.iter().rev() {
                let h = consumers
                    .get(&id)
                    .into_iter()
                    .flatten()
                    .map(|c| height[c] + 1)
                    .max()
                    .unwrap_or(0);
                height.insert(id, h);
            }
            let top = height.values().copied().max().unwrap_or(0);
            height.into_iter().map(|(id, h)| (id, top - h)).collect()
        }
    };
    let mut order = topo;
    order.sort_by_key(|id| (key[id], *id));
    order
}

fn kahn(deps: &BTreeMap<NodeId, Vec<NodeId>>, consumers: &BTreeMap<NodeId, Vec<NodeId>>) -> Vec<NodeId> {
    let mut indegree: BTreeMap<NodeId, usize> = deps.iter().map(|(&id, d)| (id, d.len())).collect();
    let mut ready: BTreeSet<NodeId> = indegree.iter().filter(|(_, &d)| d == 0).map(|(&id, _)| id).collect();
    let mut order = Vec::with_capacity(deps.len());
    while let Some(id) = ready.pop_first() {
        order.push(id);
        for c in consumers.get(&id).into_iter().flatten() {
            let d = indegree.get_mut(c).expect("consumer in closure");
            *d -= 1;
            if *d == 0 {
                ready.insert(*c);
            }
        }
    }
    order
}
