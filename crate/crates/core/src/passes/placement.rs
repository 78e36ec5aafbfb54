//! Cost-model device placement.
//!
//! Nodes are visited once in topological order. Each candidate device is
//! charged the node's estimated run time there plus the transfer time of
//! every input produced on another device; a device without a kernel for the
//! node's kind costs infinity. The cheapest device wins, ties going to the
//! lexicographically smallest name.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Node, NodeId, OpKind, TensorId, TensorSpec};
use crate::tensor::DType;

pub const DEFAULT_BANDWIDTH: f64 = 1000.0;
pub const DEFAULT_LATENCY_US: f64 = 50.0;
pub const DEFAULT_BATCH_HINT: usize = 100;
/// Elementwise work: microseconds per thousand elements.
pub const ELEMENTWISE_US_PER_K: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DeviceKind {
    #[default]
    SimCPU,
}

/// A simulated execution unit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Device {
    pub name: String,
    #[serde(default)]
    pub kind: DeviceKind,
    /// Supported kinds; `None` means every kind.
    #[serde(default)]
    pub kernels: Option<BTreeSet<OpKind>>,
    /// Per-kind multiplier on the default time estimate.
    #[serde(default)]
    pub per_op_time: BTreeMap<OpKind, f64>,
    /// Link bandwidth in bytes per simulated microsecond.
    #[serde(default = "default_bandwidth")]
    pub bandwidth: f64,
}

fn default_bandwidth() -> f64 {
    DEFAULT_BANDWIDTH
}

fn default_latency() -> f64 {
    DEFAULT_LATENCY_US
}

impl Device {
    pub fn new(name: impl Into<String>) -> Device {
        Device {
            name: name.into(),
            kind: DeviceKind::SimCPU,
            kernels: None,
            per_op_time: BTreeMap::new(),
            bandwidth: DEFAULT_BANDWIDTH,
        }
    }

    pub fn with_kernels(mut self, kinds: impl IntoIterator<Item = OpKind>) -> Device {
        self.kernels = Some(kinds.into_iter().collect());
        self
    }

    pub fn without_kernels(mut self, kinds: &[OpKind]) -> Device {
        let all = OpKind::ALL.iter().copied().filter(|k| !kinds.contains(k));
        self.kernels = Some(all.collect());
        self
    }

    pub fn supports(&self, kind: OpKind) -> bool {
        self.kernels.as_ref().is_none_or(|k| k.contains(&kind))
    }

    /// Worker label of a `/worker:A/cpu:0` style name.
    pub fn worker(&self) -> &str {
        self.name.trim_start_matches('/').split('/').next().unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PlacementError {
    #[error("node {node} ({kind}) has no device with a kernel for it")]
    NoFeasibleDevice { node: String, kind: OpKind },
    #[error("node {node} is constrained to {device}: {reason}")]
    ConstraintInfeasible {
        node: String,
        device: String,
        reason: String,
    },
    #[error("invalid fleet: {0}")]
    InvalidFleet(String),
}

/// The set of devices available to a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fleet {
    #[serde(default = "default_latency")]
    pub latency_us: f64,
    pub devices: Vec<Device>,
}

impl Fleet {
    pub fn new(devices: Vec<Device>) -> Result<Fleet, PlacementError> {
        let fleet = Fleet {
            latency_us: DEFAULT_LATENCY_US,
            devices,
        };
        fleet.validate()?;
        Ok(fleet)
    }

    /// `n` identical devices `/worker:0/cpu:0 .. /worker:{n-1}/cpu:0`.
    pub fn uniform(n: usize) -> Fleet {
        Fleet {
            latency_us: DEFAULT_LATENCY_US,
            devices: (0..n.max(1))
                .map(|i| Device::new(format!("/worker:{i}/cpu:0")))
                .collect(),
        }
    }

    pub fn from_json(text: &str) -> Result<Fleet, PlacementError> {
        let fleet: Fleet = serde_json::from_str(text).map_err(|e| PlacementError::InvalidFleet(e.to_string()))?;
        fleet.validate()?;
        Ok(fleet)
    }

    pub fn validate(&self) -> Result<(), PlacementError> {
        if self.devices.is_empty() {
            return Err(PlacementError::InvalidFleet("no devices".into()));
        }
        let mut seen = BTreeSet::new();
        for d in &self.devices {
            if !seen.insert(d.name.as_str()) {
                return Err(PlacementError::InvalidFleet(format!("duplicate device {}", d.name)));
            }
            if d.bandwidth.is_nan() || d.bandwidth <= 0.0 {
                return Err(PlacementError::InvalidFleet(format!(
                    "{}: bandwidth must be positive",
                    d.name
                )));
            }
        }
        if self.latency_us.is_nan() || self.latency_us < 0.0 {
            return Err(PlacementError::InvalidFleet("latency must be nonnegative".into()));
        }
        Ok(())
    }

    pub fn device(&self, name: &str) -> Option<&Device> {
        self.devices.iter().find(|d| d.name == name)
    }

    pub fn names(&self) -> Vec<String> {
        self.devices.iter().map(|d| d.name.clone()).collect()
    }
}

/// Run-time and transfer-time estimates over a fleet.
#[derive(Debug, Clone, PartialEq)]
pub struct CostModel {
    pub fleet: Fleet,
    /// Stand-in extent for dynamic dimensions.
    pub batch_hint: usize,
}

impl CostModel {
    pub fn new(fleet: Fleet) -> CostModel {
        CostModel {
            fleet,
            batch_hint: DEFAULT_BATCH_HINT,
        }
    }

    pub fn with_batch_hint(mut self, hint: usize) -> CostModel {
        self.batch_hint = hint;
        self
    }

    pub fn tensor_bytes(&self, spec: &TensorSpec) -> f64 {
        let elements = spec.shape.element_count_hint(self.batch_hint);
        let width = match spec.dtype {
            DType::Summary => 64,
            d => d.size_of(),
        };
        (elements * width) as f64
    }

    /// Default time of `node` before any per-device multiplier.
    pub fn base_time(&self, node: &Node) -> f64 {
        let extent = |i: usize| -> Vec<usize> {
            node.inputs[i]
                .shape
                .dims()
                .iter()
                .map(|d| d.known().unwrap_or(self.batch_hint))
                .collect()
        };
        if node.kind == OpKind::MatMul {
            let (a, b) = (extent(0), extent(1));
            let (n, k) = if node.attrs.flag("transpose_a") {
                (a[1], a[0])
            } else {
                (a[0], a[1])
            };
            let m = if node.attrs.flag("transpose_b") { b[0] } else { b[1] };
            return (n * m * k) as f64 / 1000.0;
        }
        let elements = node
            .inputs
            .iter()
            .map(|t| t.shape.element_count_hint(self.batch_hint))
            .chain(node.outputs.iter().map(|s| s.shape.element_count_hint(self.batch_hint)))
            .max()
            .unwrap_or(0);
        elements as f64 / 1000.0 * ELEMENTWISE_US_PER_K
    }

    /// Simulated run time of `node` on `device`; infinite without a kernel.
    pub fn op_time(&self, node: &Node, device: &Device) -> f64 {
        if !device.supports(node.kind) {
            return f64::INFINITY;
        }
        self.base_time(node) * device.per_op_time.get(&node.kind).copied().unwrap_or(1.0)
    }

    /// Time to move `bytes` between two devices.
    pub fn transfer_time(&self, bytes: f64, from: &Device, to: &Device) -> f64 {
        if from.name == to.name {
            return 0.0;
        }
        bytes / from.bandwidth.min(to.bandwidth) + self.fleet.latency_us
    }
}

/// One line of the placement log.
#[derive(Debug, Clone, PartialEq)]
pub struct CostRow {
    pub node: NodeId,
    pub name: String,
    pub device: String,
    /// Set when the device came from a constraint or colocation rather
    /// than the argmin.
    pub pinned: bool,
    /// Cost on each device, in fleet order.
    pub costs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub assignment: BTreeMap<NodeId, String>,
    pub log: Vec<CostRow>,
    pub devices: Vec<String>,
}

impl Placement {
    pub fn device_of(&self, id: NodeId) -> Option<&str> {
        self.assignment.get(&id).map(String::as_str)
    }

    /// Every node on `device`.
    pub fn single(graph: &Graph, device: &str) -> Placement {
        Placement {
            assignment: graph.node_ids().map(|id| (id, device.to_string())).collect(),
            log: Vec::new(),
            devices: vec![device.to_string()],
        }
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["node".to_string(), "name".into(), "device".into(), "pinned".into()];
        header.extend(self.devices.iter().cloned());
        w.write_record(&header).expect("in-memory write");
        for row in &self.log {
            let mut rec = vec![
                row.node.to_string(),
                row.name.clone(),
                row.device.clone(),
                row.pinned.to_string(),
            ];
            rec.extend(row.costs.iter().map(|c| format_cost(*c)));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }
}

fn format_cost(c: f64) -> String {
    if c.is_infinite() {
        "inf".into()
    } else {
        format!("{c}")
    }
}

/// Greedy placement sweep.
pub fn place(graph: &Graph, model: &CostModel) -> Result<Placement, PlacementError> {
    model.fleet.validate()?;
    let order = graph
        .topological_order()
        .map_err(|e| PlacementError::InvalidFleet(e.to_string()))?;
    let devices = &model.fleet.devices;
    let mut by_name: Vec<usize> = (0..devices.len()).collect();
    by_name.sort_by(|&a, &b| devices[a].name.cmp(&devices[b].name));

    let mut assignment: BTreeMap<NodeId, String> = BTreeMap::new();
    let mut log = Vec::with_capacity(order.len());
    for id in order {
        let node = graph.expect_node(id);
        let mut transfers: BTreeMap<TensorId, (f64, String)> = BTreeMap::new();
        for (_, t) in node.data_inputs() {
            let bytes = model.tensor_bytes(&TensorSpec {
                dtype: t.dtype,
                shape: t.shape.clone(),
            });
            transfers.insert(t.id(), (bytes, assignment[&t.node].clone()));
        }
        let costs: Vec<f64> = devices
            .iter()
            .map(|d| {
                let run = model.op_time(node, d);
                if run.is_infinite() {
                    return run;
                }
                let mut total = run;
                for (bytes, from) in transfers.values() {
                    let src = model.fleet.device(from).expect("placed on a fleet device");
                    total += model.transfer_time(*bytes, src, d);
                }
                total
            })
            .collect();

        let constraint = if node.kind == OpKind::Assign {
            Some((assignment[&node.inputs[0].node].clone(), "colocated with its variable"))
        } else {
            node.device.clone().map(|d| (d, "pinned"))
        };
        let (device, pinned) = match constraint {
            Some((name, why)) => {
                let index = devices.iter().position(|d| d.name == name).ok_or_else(|| {
                    PlacementError::ConstraintInfeasible {
                        node: node.name.clone(),
                        device: name.clone(),
                        reason: "no such device in the fleet".into(),
                    }
                })?;
                if costs[index].is_infinite() {
                    return Err(PlacementError::ConstraintInfeasible {
                        node: node.name.clone(),
                        device: name,
                        reason: format!("device lacks a {} kernel ({why})", node.kind),
                    });
                }
                (name, true)
            }
            None => {
                let mut best: Option<usize> = None;
                for &i in &by_name {
                    if costs[i].is_finite() && best.is_none_or(|b| costs[i] < costs[b]) {
                        best = Some(i);
                    }
                }
                let best = best.ok_or_else(|| PlacementError::NoFeasibleDevice {
                    node: node.name.clone(),
                    kind: node.kind,
                })?;
                (devices[best].name.clone(), false)
            }
        };
        log.push(CostRow {
            node: id,
            name: node.name.clone(),
            device: device.clone(),
            pinned,
            costs,
        });
        assignment.insert(id, device);
    }
    Ok(Placement {
        assignment,
        log,
        devices: model.fleet.names(),
    })
}
