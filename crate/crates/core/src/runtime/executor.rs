//! Per-device execution of a scheduled run.
//!
//! Every device executor walks its share of one global schedule. Values that
//! cross devices travel as messages on the channel of their Send/Recv pair.
//! Simulated time advances per device: a node starts once its device is free
//! and its inputs are ready, and a received value is ready only after its
//! transfer time has elapsed.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{Receiver, RecvTimeoutError, Sender};
use std::time::{Duration, Instant};

use crate::graph::{Graph, Node, NodeId, OpKind, TensorId};
use crate::kernels;
use crate::passes::placement::{CostModel, Device, ELEMENTWISE_US_PER_K};
use crate::passes::truncate::{from_wire16, to_wire16};
use crate::tensor::{TensorData, TensorValue};

use super::checkpoint::{self, CheckpointError};
use super::trace::TraceEntry;
use super::RuntimeError;

const POLL: Duration = Duration::from_millis(50);

#[derive(Debug, Clone)]
pub(crate) enum Slot {
    Live { value: TensorValue, ready: f64 },
    Dead,
}

#[derive(Debug)]
pub(crate) enum Payload {
    Dead,
    Tensor(TensorValue),
    Wire16 { dims: Vec<usize>, words: Vec<u16> },
    Signal,
}

#[derive(Debug)]
pub(crate) struct Message {
    pub payload: Payload,
    pub ready: f64,
}

/// Read-only state shared by all executors of one run.
pub(crate) struct Plan<'a> {
    pub graph: &'a Graph,
    pub placement: &'a BTreeMap<NodeId, String>,
    pub cost: &'a CostModel,
    pub feeds: &'a HashMap<TensorId, TensorValue>,
    /// Fetched tensors, never freed.
    pub keep: &'a HashSet<TensorId>,
    /// Consumers per tensor within the run.
    pub uses: &'a HashMap<TensorId, usize>,
    pub start_time: f64,
    pub checkpoint_path: Option<&'a Path>,
    pub deadlock_timeout: Duration,
    pub abort: &'a AtomicBool,
}

pub(crate) struct Outcome {
    pub trace: Vec<(usize, TraceEntry)>,
    pub kept: HashMap<TensorId, Slot>,
    pub clock: f64,
}

pub(crate) struct Executor<'a> {
    plan: &'a Plan<'a>,
    device: &'a Device,
    clock: f64,
    values: HashMap<TensorId, Slot>,
    uses: HashMap<TensorId, usize>,
    dead: HashSet<NodeId>,
    finished: HashMap<NodeId, f64>,
    live: usize,
    pub variables: HashMap<NodeId, TensorValue>,
    senders: HashMap<i64, Sender<Message>>,
    receivers: HashMap<i64, Receiver<Message>>,
    restore_cache: HashMap<String, Vec<(String, TensorValue)>>,
    trace: Vec<(usize, TraceEntry)>,
}

impl<'a> Executor<'a> {
    pub fn new(
        plan: &'a Plan<'a>,
        device: &'a Device,
        variables: HashMap<NodeId, TensorValue>,
        senders: HashMap<i64, Sender<Message>>,
        receivers: HashMap<i64, Receiver<Message>>,
    ) -> Executor<'a> {
        Executor {
            plan,
            device,
            clock: plan.start_time,
            values: HashMap::new(),
            uses: plan.uses.clone(),
            dead: HashSet::new(),
            finished: HashMap::new(),
            live: 0,
            variables,
            senders,
            receivers,
            restore_cache: HashMap::new(),
            trace: Vec::new(),
        }
    }

    /// Runs `steps`, given as (global position, node), in order.
    pub fn run(&mut self, steps: &[(usize, NodeId)]) -> Result<Outcome, RuntimeError> {
        for &(pos, id) in steps {
            if self.plan.abort.load(Ordering::Relaxed) {
                break;
            }
            if let Err(e) = self.step(pos, id) {
                self.plan.abort.store(true, Ordering::Relaxed);
                return Err(e);
            }
        }
        let kept = self
            .values
            .iter()
            .filter(|(t, _)| self.plan.keep.contains(t))
            .map(|(t, s)| (*t, s.clone()))
            .collect();
        Ok(Outcome {
            trace: std::mem::take(&mut self.trace),
            kept,
            clock: self.clock,
        })
    }

    fn value(&self, t: TensorId) -> Option<&TensorValue> {
        if let Some(v) = self.plan.feeds.get(&t) {
            return Some(v);
        }
        match self.values.get(&t) {
            Some(Slot::Live { value, .. }) => Some(value),
            Some(Slot::Dead) => None,
            None => panic!("tensor {t} read before it was produced"),
        }
    }

    fn is_dead(&self, t: TensorId) -> bool {
        !self.plan.feeds.contains_key(&t) && matches!(self.values.get(&t), Some(Slot::Dead))
    }

    /// Earliest start allowed by inputs and control dependencies.
    fn ready_time(&self, node: &Node) -> f64 {
        let mut t = self.clock;
        for (_, input) in node.data_inputs() {
            if let Some(Slot::Live { ready, .. }) = self.values.get(&input.id()) {
                t = t.max(*ready);
            }
        }
        for c in &node.control_inputs {
            if let Some(&end) = self.finished.get(c) {
                t = t.max(end);
            }
        }
        t
    }

    fn step(&mut self, pos: usize, id: NodeId) -> Result<(), RuntimeError> {
        let node = self.plan.graph.expect_node(id);
        let control_dead = node.control_inputs.iter().any(|c| self.dead.contains(c));
        let dead = match node.kind {
            OpKind::Merge => control_dead || self.is_dead(node.inputs[2].id()),
            OpKind::Recv => false,
            _ => control_dead || node.data_inputs().any(|(_, t)| self.is_dead(t.id())),
        };
        if dead {
            if node.kind == OpKind::Send {
                self.send(node, Payload::Dead, self.clock)?;
            }
            self.mark_dead(node);
            self.consume(node);
            return Ok(());
        }
        let start = self.ready_time(node);
        let outputs = match node.kind {
            OpKind::Recv => {
                let (slot, start) = self.receive(node)?;
                self.finish_recv(pos, node, slot, start);
                return Ok(());
            }
            OpKind::Merge => {
                let pred = self.predicate(node, 2)?;
                match self.value(node.inputs[usize::from(pred)].id()) {
                    Some(value) => vec![Some(value.clone())],
                    None => {
                        self.mark_dead(node);
                        self.consume(node);
                        return Ok(());
                    }
                }
            }
            OpKind::Switch => {
                let pred = self.predicate(node, 1)?;
                let data = self.live_input(node, 0).clone();
                if pred {
                    vec![None, Some(data)]
                } else {
                    vec![Some(data), None]
                }
            }
            _ => self.compute(node)?.into_iter().map(Some).collect(),
        };
        let end = {
            let inputs: Vec<&TensorValue> = node.data_inputs().filter_map(|(_, t)| self.value(t.id())).collect();
            let produced: Vec<&TensorValue> = outputs.iter().flatten().collect();
            start + self.duration(node, &inputs, &produced)
        };
        if node.kind == OpKind::Send {
            self.send(node, self.payload(node), end)?;
        }
        self.store(node, outputs, end);
        self.finish(pos, node, start, end);
        Ok(())
    }

    fn live_input(&self, node: &Node, index: usize) -> &TensorValue {
        self.value(node.inputs[index].id())
            .expect("dead inputs are filtered before execution")
    }

    fn predicate(&self, node: &Node, index: usize) -> Result<bool, RuntimeError> {
        self.live_input(node, index)
            .scalar_value()
            .map(|p| p != 0.0)
            .ok_or_else(|| RuntimeError::Kernel {
                node: node.name.clone(),
                source: kernels::KernelError::BadAttr {
                    kind: node.kind,
                    detail: "predicate is not numeric".into(),
                },
            })
    }

    fn compute(&mut self, node: &Node) -> Result<Vec<TensorValue>, RuntimeError> {
        match node.kind {
            OpKind::Variable => {
                let v = self
                    .variables
                    .get(&node.id)
                    .ok_or_else(|| RuntimeError::UninitializedVariable(node.name.clone()))?;
                Ok(vec![v.clone()])
            }
            OpKind::Assign => {
                let value = self.live_input(node, 1).clone();
                let target = self.plan.graph.expect_node(node.inputs[0].node);
                let declared = target.outputs[0].shape.to_concrete().unwrap_or_default();
                if value.dims() != declared.as_slice() {
                    return Err(RuntimeError::AssignShapeMismatch {
                        variable: target.name.clone(),
                        expected: format!("{declared:?}"),
                        got: format!("{:?}", value.dims()),
                    });
                }
                self.variables.insert(target.id, value.clone());
                Ok(vec![value])
            }
            OpKind::Placeholder => Err(RuntimeError::MissingFeed(node.name.clone())),
            OpKind::NoOp | OpKind::Send => Ok(Vec::new()),
            OpKind::Save => {
                let names = node.attrs.strs("names").unwrap_or_default();
                let entries: Vec<(String, TensorValue)> = names
                    .iter()
                    .enumerate()
                    .map(|(i, n)| (n.clone(), self.live_input(node, i).clone()))
                    .collect();
                let path = self.checkpoint_path(node);
                checkpoint::write_file(Path::new(&path), &entries)?;
                Ok(Vec::new())
            }
            OpKind::Restore => {
                let path = self.checkpoint_path(node);
                if !self.restore_cache.contains_key(&path) {
                    let entries = checkpoint::read_file(Path::new(&path))?;
                    self.restore_cache.insert(path.clone(), entries);
                }
                let name = node.attrs.str("name").unwrap_or_default();
                let spec = &node.outputs[0];
                let dims = spec.shape.to_concrete().ok_or_else(|| CheckpointError::Unsupported {
                    name: name.to_string(),
                    reason: "restored tensors need a fully known shape".into(),
                })?;
                let value = checkpoint::lookup(&self.restore_cache[&path], name, spec.dtype, &dims)?;
                Ok(vec![value])
            }
            _ => {
                let inputs: Vec<&TensorValue> = (0..node.inputs.len()).map(|i| self.live_input(node, i)).collect();
                kernels::eval(node.kind, &inputs, &node.attrs).map_err(|source| RuntimeError::Kernel {
                    node: node.name.clone(),
                    source,
                })
            }
        }
    }

    fn checkpoint_path(&self, node: &Node) -> String {
        match self.plan.checkpoint_path {
            Some(p) => p.display().to_string(),
            None => node.attrs.str("path").unwrap_or_default().to_string(),
        }
    }

    fn duration(&self, node: &Node, inputs: &[&TensorValue], outputs: &[&TensorValue]) -> f64 {
        let base = if node.kind == OpKind::MatMul && inputs.len() == 2 {
            let (a, b) = (inputs[0].dims(), inputs[1].dims());
            let (n, k) = if node.attrs.flag("transpose_a") {
                (a[1], a[0])
            } else {
                (a[0], a[1])
            };
            let m = if node.attrs.flag("transpose_b") { b[0] } else { b[1] };
            (n * m * k) as f64 / 1000.0
        } else {
            let elements = inputs
                .iter()
                .chain(outputs)
                .map(|v| v.element_count())
                .max()
                .unwrap_or(0);
            elements as f64 / 1000.0 * ELEMENTWISE_US_PER_K
        };
        base * self.device.per_op_time.get(&node.kind).copied().unwrap_or(1.0)
    }

    fn payload(&self, node: &Node) -> Payload {
        if node.inputs.is_empty() {
            return Payload::Signal;
        }
        let value = self.live_input(node, 0);
        if node.attrs.flag("truncate") {
            if let Some(xs) = value.as_f32() {
                return Payload::Wire16 {
                    dims: value.dims().to_vec(),
                    words: xs.iter().map(|&x| to_wire16(x)).collect(),
                };
            }
        }
        Payload::Tensor(value.clone())
    }

    fn send(&self, node: &Node, payload: Payload, end: f64) -> Result<(), RuntimeError> {
        let channel = node.attrs.int("channel").unwrap_or_default();
        let bytes = match &payload {
            Payload::Tensor(v) => v.size_bytes(),
            Payload::Wire16 { words, .. } => words.len() * 2,
            Payload::Dead | Payload::Signal => 0,
        };
        let dst = node.attrs.str("dst").unwrap_or_default();
        let to = self.plan.cost.fleet.device(dst).unwrap_or(self.device);
        let ready = end + self.plan.cost.transfer_time(bytes as f64, self.device, to);
        let tx = self.senders.get(&channel).ok_or(RuntimeError::ChannelClosed {
            channel: channel as usize,
        })?;
        tx.send(Message { payload, ready })
            .map_err(|_| RuntimeError::ChannelClosed {
                channel: channel as usize,
            })
    }

    fn receive(&self, node: &Node) -> Result<(Slot, f64), RuntimeError> {
        let channel = node.attrs.int("channel").unwrap_or_default();
        let closed = RuntimeError::ChannelClosed {
            channel: channel as usize,
        };
        let rx = self.receivers.get(&channel).ok_or(closed.clone())?;
        let began = Instant::now();
        let msg = loop {
            match rx.recv_timeout(POLL) {
                Ok(m) => break m,
                Err(RecvTimeoutError::Disconnected) => return Err(closed),
                Err(RecvTimeoutError::Timeout) => {
                    if self.plan.abort.load(Ordering::Relaxed) {
                        return Err(closed);
                    }
                    if began.elapsed() >= self.plan.deadlock_timeout {
                        return Err(RuntimeError::DeadlockDetected {
                            channel: channel as usize,
                            waited_ms: began.elapsed().as_millis() as u64,
                        });
                    }
                }
            }
        };
        let start = self.clock.max(msg.ready);
        let slot = match msg.payload {
            Payload::Dead => Slot::Dead,
            Payload::Signal => Slot::Live {
                value: TensorValue::scalar(crate::tensor::DType::F32, 0.0),
                ready: start,
            },
            Payload::Tensor(value) => Slot::Live { value, ready: start },
            Payload::Wire16 { dims, words } => {
                let data = TensorData::F32(words.into_iter().map(from_wire16).collect());
                let value = TensorValue::new(dims, data).expect("wire payload sized from dims");
                Slot::Live { value, ready: start }
            }
        };
        Ok((slot, start))
    }

    fn finish_recv(&mut self, pos: usize, node: &Node, slot: Slot, start: f64) {
        match slot {
            Slot::Dead => {
                self.mark_dead(node);
            }
            Slot::Live { value, .. } => {
                let outputs = if node.outputs.is_empty() {
                    Vec::new()
                } else {
                    vec![Some(value)]
                };
                self.store(node, outputs, start);
                self.finish(pos, node, start, start);
            }
        }
    }

    fn mark_dead(&mut self, node: &Node) {
        self.dead.insert(node.id);
        for i in 0..node.outputs.len() {
            let t = TensorId {
                node: node.id,
                index: i,
            };
            if self.uses.get(&t).copied().unwrap_or(0) > 0 || self.plan.keep.contains(&t) {
                self.values.insert(t, Slot::Dead);
            }
        }
    }

    /// Keeps outputs that someone will read; a `None` output is dead.
    fn store(&mut self, node: &Node, outputs: Vec<Option<TensorValue>>, end: f64) {
        for (i, out) in outputs.into_iter().enumerate() {
            let t = TensorId {
                node: node.id,
                index: i,
            };
            let wanted = self.uses.get(&t).copied().unwrap_or(0) > 0 || self.plan.keep.contains(&t);
            if !wanted {
                continue;
            }
            match out {
                Some(value) => {
                    self.live += value.size_bytes();
                    self.values.insert(t, Slot::Live { value, ready: end });
                }
                None => {
                    self.values.insert(t, Slot::Dead);
                }
            }
        }
        self.consume(node);
    }

    /// Releases input buffers whose last reader was `node`.
    fn consume(&mut self, node: &Node) {
        let read: HashSet<TensorId> = node.data_inputs().map(|(_, t)| t.id()).collect();
        for t in read {
            let Some(left) = self.uses.get_mut(&t) else { continue };
            *left = left.saturating_sub(1);
            if *left == 0 && !self.plan.keep.contains(&t) {
                if let Some(Slot::Live { value, .. }) = self.values.remove(&t) {
                    self.live -= value.size_bytes();
                }
            }
        }
    }

    fn finish(&mut self, pos: usize, node: &Node, start: f64, end: f64) {
        self.clock = end;
        self.finished.insert(node.id, end);
        self.trace.push((
            pos,
            TraceEntry {
                node: node.id,
                name: node.name.clone(),
                kind: node.kind,
                device: self.plan.placement[&node.id].clone(),
                start,
                end,
                live_bytes: self.live,
            },
        ));
    }
}
