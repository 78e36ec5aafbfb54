//! Splitting a placed graph into per-device pieces joined by Send/Recv pairs.

use std::collections::BTreeMap;

use crate::graph::{Graph, NodeDef, NodeId, OpKind, TensorId};
use crate::tensor::DType;

use super::placement::Placement;

/// One Send/Recv pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Channel {
    pub id: usize,
    pub send: NodeId,
    pub recv: NodeId,
    pub src_device: String,
    pub dst_device: String,
    /// The transported tensor; `None` for a control-only channel.
    pub tensor: Option<TensorId>,
    /// For control channels, the node whose completion is signalled.
    pub control_source: Option<NodeId>,
    pub dtype: Option<DType>,
    pub truncate: bool,
}

/// A graph whose cross-device edges all pass through channels.
#[derive(Debug, Clone)]
pub struct PartitionedProgram {
    /// Original nodes keep their ids; Send, Recv and truncation nodes are
    /// appended.
    pub graph: Graph,
    pub placement: BTreeMap<NodeId, String>,
    pub channels: Vec<Channel>,
}

impl PartitionedProgram {
    /// Node ids per device, ascending.
    pub fn device_nodes(&self) -> BTreeMap<String, Vec<NodeId>> {
        let mut out: BTreeMap<String, Vec<NodeId>> = BTreeMap::new();
        for (&id, dev) in &self.placement {
            out.entry(dev.clone()).or_default().push(id);
        }
        out
    }

    pub fn channel(&self, id: usize) -> &Channel {
        &self.channels[id]
    }

    pub fn count_kind(&self, kind: OpKind) -> usize {
        self.graph.nodes().filter(|n| n.kind == kind).count()
    }
}

/// Rewrites every cross-device edge. One Send and one Recv are created per
/// (producer tensor, destination device), and the Recv feeds every consumer
/// on that device. With `truncate`, F32 tensors pass through CastTruncate16
/// on the sending side and travel as 16-bit words.
pub fn partition(graph: &Graph, placement: &Placement, truncate: bool) -> PartitionedProgram {
    let mut g = graph.clone();
    let mut where_: BTreeMap<NodeId, String> = placement.assignment.clone();
    let mut channels: Vec<Channel> = Vec::new();
    let mut data_recv: BTreeMap<(TensorId, String), NodeId> = BTreeMap::new();
    let mut control_recv: BTreeMap<(NodeId, String), NodeId> = BTreeMap::new();

    let order = graph.topological_order().expect("placed graphs are acyclic");
    for v in order {
        let node = graph.expect_node(v).clone();
        let dst = where_[&v].clone();
        for (i, t) in node.inputs.iter().enumerate() {
            let src = where_[&t.node].clone();
            if src == dst || node.kind.is_ref_input(i) {
                continue;
            }
            let recv = *data_recv.entry((t.id(), dst.clone())).or_insert_with(|| {
                let id = channels.len();
                let cut = truncate && t.dtype == DType::F32;
                let sent = if cut {
                    let c = g
                        .insert_unfrozen(
                            NodeDef::new(OpKind::CastTruncate16)
                                .input(t)
                                .name(format!("_truncate_{id}")),
                        )
                        .expect("truncating an f32 tensor is valid");
                    where_.insert(c, src.clone());
                    g.output(c, 0)
                } else {
                    t.clone()
                };
                let send = g
                    .insert_unfrozen(
                        NodeDef::new(OpKind::Send)
                            .input(&sent)
                            .attr("channel", id as i64)
                            .attr("src", src.as_str())
                            .attr("dst", dst.as_str())
                            .attr("truncate", cut)
                            .name(format!("_send_{id}")),
                    )
                    .expect("send nodes are valid");
                let recv = g
                    .insert_unfrozen(
                        NodeDef::new(OpKind::Recv)
                            .attr("channel", id as i64)
                            .attr("src", src.as_str())
                            .attr("dst", dst.as_str())
                            .attr("truncate", cut)
                            .attr("dtype", t.dtype)
                            .attr("shape", t.shape.clone())
                            .name(format!("_recv_{id}")),
                    )
                    .expect("recv nodes are valid");
                where_.insert(send, src.clone());
                where_.insert(recv, dst.clone());
                channels.push(Channel {
                    id,
                    send,
                    recv,
                    src_device: src.clone(),
                    dst_device: dst.clone(),
                    tensor: Some(t.id()),
                    control_source: None,
                    dtype: Some(t.dtype),
                    truncate: cut,
                });
                recv
            });
            let replacement = g.output(recv, 0);
            g.node_mut(v).expect("original node").inputs[i] = replacement;
        }
        for &c in &node.control_inputs {
            let src = where_[&c].clone();
            if src == dst {
                continue;
            }
            let recv = *control_recv.entry((c, dst.clone())).or_insert_with(|| {
                let id = channels.len();
                let send = g
                    .insert_unfrozen(
                        NodeDef::new(OpKind::Send)
                            .control(c)
                            .attr("channel", id as i64)
                            .attr("src", src.as_str())
                            .attr("dst", dst.as_str())
                            .name(format!("_send_{id}")),
                    )
                    .expect("control sends are valid");
                let recv = g
                    .insert_unfrozen(
                        NodeDef::new(OpKind::Recv)
                            .attr("channel", id as i64)
                            .attr("src", src.as_str())
                            .attr("dst", dst.as_str())
                            .attr("control", true)
                            .name(format!("_recv_{id}")),
                    )
                    .expect("control recvs are valid");
                where_.insert(send, src.clone());
                where_.insert(recv, dst.clone());
                channels.push(Channel {
                    id,
                    send,
                    recv,
                    src_device: src.clone(),
                    dst_device: dst.clone(),
                    tensor: None,
                    control_source: Some(c),
                    dtype: None,
                    truncate: false,
                });
                recv
            });
            let n = g.node_mut(v).expect("original node");
            n.control_inputs.remove(&c);
            n.control_inputs.insert(recv);
        }
    }
    if graph.is_frozen() {
        g.freeze();
    }
    PartitionedProgram {
        graph: g,
        placement: where_,
        channels,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::passes::placement::Placement;
    use crate::tensor::{Shape, TensorValue};

    fn placement(pairs: &[(NodeId, &str)]) -> Placement {
        Placement {
            assignment: pairs.iter().map(|&(id, d)| (id, d.to_string())).collect(),
            log: Vec::new(),
            devices: Vec::new(),
        }
    }

    #[test]
    fn cross_device_graph_has_one_send_and_one_recv() {
        let mut g = Graph::new();
        let nu = g.constant(TensorValue::filled(DType::F32, &[2], 1.5)).unwrap();
        let alpha = g.exp(&nu).unwrap();
        let beta = g.neg(&nu).unwrap();
        let p = placement(&[(nu.node, "A"), (alpha.node, "B"), (beta.node, "B")]);
        let prog = partition(&g, &p, false);
        assert_eq!(prog.count_kind(OpKind::Send), 1);
        assert_eq!(prog.count_kind(OpKind::Recv), 1);
        let recv = prog.channels[0].recv;
        assert_eq!(prog.graph.expect_node(alpha.node).inputs[0].node, recv);
        assert_eq!(prog.graph.expect_node(beta.node).inputs[0].node, recv);
        assert_eq!(prog.placement[&prog.channels[0].send], "A");
    }

    #[test]
    fn one_recv_per_destination() {
        let mut g = Graph::new();
        let nu = g.constant(TensorValue::filled(DType::F32, &[2], 1.5)).unwrap();
        let b = g.exp(&nu).unwrap();
        let c1 = g.neg(&nu).unwrap();
        let c2 = g.relu(&nu).unwrap();
        let p = placement(&[(nu.node, "A"), (b.node, "B"), (c1.node, "C"), (c2.node, "C")]);
        let prog = partition(&g, &p, true);
        assert_eq!(prog.count_kind(OpKind::Recv), 2);
        assert_eq!(prog.count_kind(OpKind::Send), 2);
        assert_eq!(prog.count_kind(OpKind::CastTruncate16), 2);
        assert!(prog.channels.iter().all(|c| c.truncate));
    }

    #[test]
    fn single_device_is_identity() {
        let mut g = Graph::new();
        let x = g.placeholder(DType::F64, Shape::known(&[3]), "x").unwrap();
        let y = g.exp(&x).unwrap();
        let n = g.group([y.node], "done").unwrap();
        let p = Placement::single(&g, "/worker:0/cpu:0");
        let prog = partition(&g, &p, true);
        assert!(prog.channels.is_empty());
        assert_eq!(prog.graph, g);
        assert!(prog.graph.node(n).is_some());
    }

    #[test]
    fn control_edges_cross_as_control_channels() {
        let mut g = Graph::new();
        let a = g.scalar(DType::F32, 1.0).unwrap();
        let n = g.group([a.node], "after").unwrap();
        let p = placement(&[(a.node, "A"), (n, "B")]);
        let prog = partition(&g, &p, false);
        assert_eq!(prog.channels.len(), 1);
        let ch = &prog.channels[0];
        assert_eq!(ch.tensor, None);
        assert!(prog.graph.expect_node(n).control_inputs.contains(&ch.recv));
        assert!(prog.graph.expect_node(ch.recv).outputs.is_empty());
    }

    #[test]
    fn f64_is_never_truncated() {
        let mut g = Graph::new();
        let x = g.placeholder(DType::F64, Shape::known(&[3]), "x").unwrap();
        let y = g.exp(&x).unwrap();
        let prog = partition(&g, &placement(&[(x.node, "A"), (y.node, "B")]), true);
        assert_eq!(prog.count_kind(OpKind::CastTruncate16), 0);
        assert!(!prog.channels[0].truncate);
    }
}
