//! Sessions: running pruned, scheduled and partitioned graphs.
//!
//! A [`Session`] takes ownership of a graph, freezes it and prepares it once:
//! optional common subgraph elimination, placement over the session's fleet
//! and Send/Recv partitioning. Each run then computes the backward closure of
//! its fetches and targets, orders it, and hands every device its share of
//! the schedule. Devices run on their own threads when more than one of them
//! takes part in a run.

pub mod checkpoint;
mod executor;
pub mod schedule;
pub mod trace;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::mpsc;
use std::time::Duration;

use crate::graph::{Graph, GraphError, NodeId, OpKind, TensorId, TensorRef};
use crate::kernels::KernelError;
use crate::passes::placement::DEFAULT_BATCH_HINT;
use crate::passes::{
    eliminate_common_subgraphs, partition, place, CostModel, CseReport, Fleet, PartitionedProgram, Placement,
    PlacementError,
};
use crate::tensor::TensorValue;

pub use checkpoint::{CheckpointError, Saver};
pub use schedule::SchedulePolicy;
pub use trace::{RunTrace, TraceEntry};

use executor::{Executor, Message, Outcome, Plan, Slot};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RuntimeError {
    #[error("placeholder {0} is needed by this run but was not fed")]
    MissingFeed(String),
    #[error("feed for {tensor} is {got}, graph declares {expected}")]
    ShapeMismatchAtFeed {
        tensor: String,
        expected: String,
        got: String,
    },
    #[error("no tensor {0} in this session's graph")]
    UnknownTensor(String),
    #[error("variable {0} was read before it was initialized")]
    UninitializedVariable(String),
    #[error("fetched tensor {0} is on an untaken branch")]
    DeadFetch(String),
    #[error("node {node}: {source}")]
    Kernel { node: String, source: KernelError },
    #[error("cannot assign {got} to variable {variable} of shape {expected}")]
    AssignShapeMismatch {
        variable: String,
        expected: String,
        got: String,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("channel {channel} closed before its value arrived")]
    ChannelClosed { channel: usize },
    #[error("no progress on channel {channel} after {waited_ms} ms")]
    DeadlockDetected { channel: usize, waited_ms: u64 },
    #[error("worker for {0} stopped unexpectedly")]
    WorkerFailed(String),
    #[error(transparent)]
    Placement(#[from] PlacementError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

impl RuntimeError {
    /// Errors that are consequences of another executor failing.
    fn is_secondary(&self) -> bool {
        matches!(
            self,
            RuntimeError::ChannelClosed { .. } | RuntimeError::DeadlockDetected { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionOptions {
    /// Devices to place on; one device when unset.
    pub fleet: Option<Fleet>,
    /// Send cross-device f32 tensors as truncated 16-bit words.
    pub truncate_wire: bool,
    /// Run common subgraph elimination before placement.
    pub cse: bool,
    pub schedule: SchedulePolicy,
    /// Extent assumed for dynamic dimensions when estimating costs.
    pub batch_hint: usize,
    /// How long a Recv may wait before the run is declared stuck.
    pub deadlock_timeout: Duration,
}

impl Default for SessionOptions {
    fn default() -> Self {
        SessionOptions {
            fleet: None,
            truncate_wire: false,
            cse: false,
            schedule: SchedulePolicy::Alap,
            batch_hint: DEFAULT_BATCH_HINT,
            deadlock_timeout: Duration::from_secs(30),
        }
    }
}

/// Per-run settings.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunOptions {
    /// Overrides the path baked into Save and Restore nodes.
    pub checkpoint_path: Option<PathBuf>,
}

/// Replacement values for tensors, keyed by tensor.
#[derive(Debug, Clone, Default)]
pub struct Feeds {
    entries: Vec<(TensorId, TensorValue)>,
}

impl Feeds {
    pub fn new() -> Feeds {
        Feeds::default()
    }

    pub fn with(mut self, t: &TensorRef, value: TensorValue) -> Feeds {
        self.insert(t, value);
        self
    }

    /// Adds or replaces the value fed for `t`.
    pub fn insert(&mut self, t: &TensorRef, value: TensorValue) {
        let id = t.id();
        self.entries.retain(|(e, _)| *e != id);
        self.entries.push((id, value));
    }

    pub fn iter(&self) -> impl Iterator<Item = (TensorId, &TensorValue)> {
        self.entries.iter().map(|(t, v)| (*t, v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Execution environment owning variable state for one graph.
#[derive(Debug)]
pub struct Session {
    source: Graph,
    cse: Option<CseReport>,
    cost: CostModel,
    placement: Placement,
    program: PartitionedProgram,
    send_of_recv: HashMap<NodeId, NodeId>,
    options: SessionOptions,
    variables: HashMap<NodeId, TensorValue>,
    clock: f64,
    runs: u64,
    last_trace: Option<RunTrace>,
}

impl Session {
    pub fn new(graph: Graph) -> Result<Session, RuntimeError> {
        Session::with_options(graph, SessionOptions::default())
    }

    pub fn with_options(mut graph: Graph, options: SessionOptions) -> Result<Session, RuntimeError> {
        graph.freeze();
        let (optimized, cse) = if options.cse {
            let (g, report) = eliminate_common_subgraphs(&graph);
            (g, Some(report))
        } else {
            (graph.clone(), None)
        };
        let fleet = options.fleet.clone().unwrap_or_else(|| Fleet::uniform(1));
        let cost = CostModel::new(fleet).with_batch_hint(options.batch_hint);
        let placement = place(&optimized, &cost)?;
        let program = partition(&optimized, &placement, options.truncate_wire);
        let send_of_recv = program.channels.iter().map(|c| (c.recv, c.send)).collect();
        log::debug!(
            "session ready: {} nodes, {} channels over {} devices",
            program.graph.len(),
            program.channels.len(),
            cost.fleet.devices.len()
        );
        Ok(Session {
            source: graph,
            cse,
            cost,
            placement,
            program,
            send_of_recv,
            options,
            variables: HashMap::new(),
            clock: 0.0,
            runs: 0,
            last_trace: None,
        })
    }

    /// The graph as built, frozen.
    pub fn graph(&self) -> &Graph {
        &self.source
    }

    /// The graph actually executed, after elimination and partitioning.
    pub fn program(&self) -> &PartitionedProgram {
        &self.program
    }

    pub fn placement(&self) -> &Placement {
        &self.placement
    }

    pub fn cse_report(&self) -> Option<&CseReport> {
        self.cse.as_ref()
    }

    pub fn options(&self) -> &SessionOptions {
        &self.options
    }

    pub fn cost_model(&self) -> &CostModel {
        &self.cost
    }

    /// Simulated microseconds elapsed over all runs.
    pub fn clock(&self) -> f64 {
        self.clock
    }

    pub fn run_count(&self) -> u64 {
        self.runs
    }

    pub fn last_trace(&self) -> Option<&RunTrace> {
        self.last_trace.as_ref()
    }

    fn resolve(&self, id: NodeId) -> NodeId {
        self.cse.as_ref().map_or(id, |r| r.resolve(id))
    }

    fn resolve_tensor(&self, t: TensorId) -> TensorId {
        TensorId {
            node: self.resolve(t.node),
            index: t.index,
        }
    }

    fn tensor_name(&self, t: TensorId) -> String {
        match self.program.graph.node(t.node) {
            Some(n) => format!("{}:{}", n.name, t.index),
            None => t.to_string(),
        }
    }

    /// Current value of a variable, if it has been initialized.
    pub fn variable(&self, var: &TensorRef) -> Option<&TensorValue> {
        self.variables.get(&self.resolve(var.node))
    }

    pub fn variable_by_name(&self, name: &str) -> Option<&TensorValue> {
        let node = self.source.node_by_name(name)?;
        (node.kind == OpKind::Variable)
            .then(|| self.variables.get(&node.id))
            .flatten()
    }

    /// Every initialized variable by name.
    pub fn variable_snapshot(&self) -> BTreeMap<String, TensorValue> {
        self.variables
            .iter()
            .map(|(id, v)| (self.source.expect_node(*id).name.clone(), v.clone()))
            .collect()
    }

    /// Evaluates `fetches`.
    pub fn run(&mut self, fetches: &[TensorRef], feeds: &Feeds) -> Result<Vec<TensorValue>, RuntimeError> {
        self.run_with_options(fetches, &[], feeds, &RunOptions::default())
    }

    /// Runs `targets` for their effects.
    pub fn run_targets(&mut self, targets: &[NodeId], feeds: &Feeds) -> Result<(), RuntimeError> {
        self.run_with_options(&[], targets, feeds, &RunOptions::default())
            .map(|_| ())
    }

    /// Writes every variable covered by `saver` to `path`.
    pub fn save(&mut self, saver: &Saver, path: &Path) -> Result<(), RuntimeError> {
        let opts = RunOptions {
            checkpoint_path: Some(path.to_path_buf()),
        };
        self.run_with_options(&[], &[saver.save_op], &Feeds::new(), &opts)
            .map(|_| ())
    }

    /// Overwrites every variable covered by `saver` from `path`.
    pub fn restore(&mut self, saver: &Saver, path: &Path) -> Result<(), RuntimeError> {
        let opts = RunOptions {
            checkpoint_path: Some(path.to_path_buf()),
        };
        self.run_with_options(&[], &[saver.restore_op], &Feeds::new(), &opts)
            .map(|_| ())
    }

    /// One run: evaluates `fetches` and executes `targets`, with `feeds`
    /// replacing the named tensors and cutting off their producers.
    pub fn run_with_options(
        &mut self,
        fetches: &[TensorRef],
        targets: &[NodeId],
        feeds: &Feeds,
        opts: &RunOptions,
    ) -> Result<Vec<TensorValue>, RuntimeError> {
        let graph = &self.program.graph;
        let mut fed: HashMap<TensorId, TensorValue> = HashMap::new();
        for (t, value) in feeds.iter() {
            let t = self.resolve_tensor(t);
            let spec = graph
                .tensor(t)
                .ok_or_else(|| RuntimeError::UnknownTensor(t.to_string()))?;
            if value.dtype() != spec.dtype || !spec.shape.accepts(value.dims()) {
                return Err(RuntimeError::ShapeMismatchAtFeed {
                    tensor: self.tensor_name(t),
                    expected: format!("{}{}", spec.dtype, spec.shape),
                    got: format!("{}{:?}", value.dtype(), value.dims()),
                });
            }
            fed.insert(t, value.clone());
        }
        let fetch_ids: Vec<TensorId> = fetches.iter().map(|t| self.resolve_tensor(t.id())).collect();
        for &t in &fetch_ids {
            graph
                .tensor(t)
                .ok_or_else(|| RuntimeError::UnknownTensor(t.to_string()))?;
        }
        let mut roots: Vec<NodeId> = fetch_ids
            .iter()
            .filter(|t| !fed.contains_key(t))
            .map(|t| t.node)
            .collect();
        for &target in targets {
            let id = self.resolve(target);
            if graph.node(id).is_none() {
                return Err(RuntimeError::UnknownTensor(target.to_string()));
            }
            roots.push(id);
        }

        let fed_ids: HashSet<TensorId> = fed.keys().copied().collect();
        let nodes = schedule::closure(graph, roots, &fed_ids, &self.send_of_recv)?;
        let order = schedule::schedule(graph, &nodes, &fed_ids, &self.send_of_recv, self.options.schedule);
        let mut uses: HashMap<TensorId, usize> = HashMap::new();
        for &id in &nodes {
            let read: HashSet<TensorId> = graph
                .expect_node(id)
                .data_inputs()
                .map(|(_, t)| t.id())
                .filter(|t| !fed_ids.contains(t))
                .collect();
            for t in read {
                *uses.entry(t).or_default() += 1;
            }
        }
        let keep: HashSet<TensorId> = fetch_ids.iter().copied().collect();

        let assignment = &self.program.placement;
        let mut steps: BTreeMap<&str, Vec<(usize, NodeId)>> = BTreeMap::new();
        for (pos, &id) in order.iter().enumerate() {
            steps.entry(assignment[&id].as_str()).or_default().push((pos, id));
        }
        let mut senders: HashMap<&str, HashMap<i64, mpsc::Sender<Message>>> = HashMap::new();
        let mut receivers: HashMap<&str, HashMap<i64, mpsc::Receiver<Message>>> = HashMap::new();
        for ch in self.program.channels.iter().filter(|c| nodes.contains(&c.recv)) {
            let (tx, rx) = mpsc::channel();
            senders
                .entry(ch.src_device.as_str())
                .or_default()
                .insert(ch.id as i64, tx);
            receivers
                .entry(ch.dst_device.as_str())
                .or_default()
                .insert(ch.id as i64, rx);
        }
        let mut stores: HashMap<&str, HashMap<NodeId, TensorValue>> = HashMap::new();
        let mut idle: HashMap<NodeId, TensorValue> = HashMap::new();
        for (id, value) in self.variables.drain() {
            let dev = assignment[&id].as_str();
            if steps.contains_key(dev) {
                stores.entry(dev).or_default().insert(id, value);
            } else {
                idle.insert(id, value);
            }
        }

        let abort = AtomicBool::new(false);
        let plan = Plan {
            graph,
            placement: assignment,
            cost: &self.cost,
            feeds: &fed,
            keep: &keep,
            uses: &uses,
            start_time: self.clock,
            checkpoint_path: opts.checkpoint_path.as_deref(),
            deadlock_timeout: self.options.deadlock_timeout,
            abort: &abort,
        };
        let fleet = &self.cost.fleet;
        let run_device = |dev: &str, store, tx, rx, work: &[(usize, NodeId)]| {
            let device = fleet.device(dev).expect("placement uses fleet devices");
            let mut ex = Executor::new(&plan, device, store, tx, rx);
            let result = ex.run(work);
            (ex.variables, result)
        };

        let mut results: Vec<(String, Result<Outcome, RuntimeError>)> = Vec::new();
        if steps.len() <= 1 {
            for (dev, work) in &steps {
                let store = stores.remove(dev).unwrap_or_default();
                let (vars, result) = run_device(
                    dev,
                    store,
                    senders.remove(dev).unwrap_or_default(),
                    receivers.remove(dev).unwrap_or_default(),
                    work,
                );
                idle.extend(vars);
                results.push((dev.to_string(), result));
            }
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = steps
                    .iter()
                    .map(|(dev, work)| {
                        let store = stores.remove(dev).unwrap_or_default();
                        let tx = senders.remove(dev).unwrap_or_default();
                        let rx = receivers.remove(dev).unwrap_or_default();
                        let run_device = &run_device;
                        (dev, scope.spawn(move || run_device(dev, store, tx, rx, work)))
                    })
                    .collect();
                for (dev, handle) in handles {
                    match handle.join() {
                        Ok((vars, result)) => {
                            idle.extend(vars);
                            results.push((dev.to_string(), result));
                        }
                        Err(_) => {
                            abort.store(true, std::sync::atomic::Ordering::Relaxed);
                            results.push((dev.to_string(), Err(RuntimeError::WorkerFailed(dev.to_string()))));
                        }
                    }
                }
            });
        }
        self.variables = idle;

        let mut outcomes = Vec::with_capacity(results.len());
        let mut errors = Vec::new();
        for (dev, result) in results {
            match result {
                Ok(o) => outcomes.push(o),
                Err(e) => errors.push((dev, e)),
            }
        }
        if !errors.is_empty() {
            let root = errors.iter().position(|(_, e)| !e.is_secondary()).unwrap_or(0);
            let (dev, err) = errors.swap_remove(root);
            log::debug!("run failed on {dev}: {err}");
            return Err(err);
        }

        let mut kept: HashMap<TensorId, Slot> = HashMap::new();
        let mut entries = Vec::new();
        let mut clock = self.clock;
        for o in outcomes {
            kept.extend(o.kept);
            entries.extend(o.trace);
            clock = clock.max(o.clock);
        }
        entries.sort_by_key(|(pos, _)| *pos);
        let trace = RunTrace {
            entries: entries.into_iter().map(|(_, e)| e).collect(),
        };

        let mut values = Vec::with_capacity(fetch_ids.len());
        for t in &fetch_ids {
            if let Some(v) = fed.get(t) {
                values.push(v.clone());
                continue;
            }
            match kept.get(t) {
                Some(Slot::Live { value, .. }) => values.push(value.clone()),
                _ => return Err(RuntimeError::DeadFetch(self.tensor_name(*t))),
            }
        }
        self.clock = clock;
        self.runs += 1;
        self.last_trace = Some(trace);
        Ok(values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{DType, Shape};

    fn scalar(v: f64) -> TensorValue {
        TensorValue::scalar(DType::F64, v)
    }

    #[test]
    fn adds_fed_scalars_and_prunes_the_rest() {
        let mut g = Graph::new();
        let x = g.placeholder(DType::F64, Shape::scalar(), "x").unwrap();
        let y = g.placeholder(DType::F64, Shape::scalar(), "y").unwrap();
        let z = g.add(&x, &y).unwrap();
        let unrelated = g.exp(&x).unwrap();
        let mut s = Session::new(g).unwrap();
        let out = s
            .run(
                std::slice::from_ref(&z),
                &Feeds::new().with(&x, scalar(1.0)).with(&y, scalar(2.0)),
            )
            .unwrap();
        assert_eq!(out[0].scalar_value(), Some(3.0));
        let trace = s.last_trace().unwrap();
        assert_eq!(trace.node_ids(), vec![z.node]);
        assert!(!trace.contains(unrelated.node));
    }

    #[test]
    fn feed_shape_and_dtype_are_checked() {
        let mut g = Graph::new();
        let x = g
            .placeholder(DType::F32, Shape::from_opt(&[None, Some(3)]), "x")
            .unwrap();
        let y = g.neg(&x).unwrap();
        let mut s = Session::new(g).unwrap();
        let ok = TensorValue::zeros(DType::F32, &[5, 3]);
        assert_eq!(
            s.run(std::slice::from_ref(&y), &Feeds::new().with(&x, ok)).unwrap()[0].dims(),
            &[5, 3]
        );
        let bad = TensorValue::zeros(DType::F32, &[5, 4]);
        assert!(matches!(
            s.run(std::slice::from_ref(&y), &Feeds::new().with(&x, bad)),
            Err(RuntimeError::ShapeMismatchAtFeed { .. })
        ));
        let wrong_type = TensorValue::zeros(DType::F64, &[5, 3]);
        assert!(matches!(
            s.run(&[y], &Feeds::new().with(&x, wrong_type)),
            Err(RuntimeError::ShapeMismatchAtFeed { .. })
        ));
    }

    #[test]
    fn variables_persist_and_need_initialization() {
        let mut g = Graph::new();
        let v = g.variable(scalar(1.0), "v").unwrap();
        let one = g.scalar(DType::F64, 1.0).unwrap();
        let next = g.add(&v.var, &one).unwrap();
        let bump = g.assign(&v.var, &next).unwrap();
        let init = g.initialize_all_variables().unwrap();
        let mut s = Session::new(g).unwrap();
        assert_eq!(
            s.run(std::slice::from_ref(&v.var), &Feeds::new()),
            Err(RuntimeError::UninitializedVariable("v".into()))
        );
        s.run_targets(&[init], &Feeds::new()).unwrap();
        for _ in 0..4 {
            s.run(std::slice::from_ref(&bump), &Feeds::new()).unwrap();
        }
        assert_eq!(s.variable(&v.var).unwrap().scalar_value(), Some(5.0));
        assert_eq!(s.run_count(), 5);
    }

    #[test]
    fn untaken_branch_is_dead() {
        let mut g = Graph::new();
        let p = g.placeholder(DType::F64, Shape::scalar(), "p").unwrap();
        let x = g.placeholder(DType::F64, Shape::scalar(), "x").unwrap();
        let (on_false, on_true) = g.switch(&x, &p).unwrap();
        let mut s = Session::new(g).unwrap();
        let feeds = Feeds::new().with(&p, scalar(1.0)).with(&x, scalar(4.0));
        assert_eq!(s.run(&[on_true], &feeds).unwrap()[0].scalar_value(), Some(4.0));
        assert!(matches!(s.run(&[on_false], &feeds), Err(RuntimeError::DeadFetch(_))));
    }
}
