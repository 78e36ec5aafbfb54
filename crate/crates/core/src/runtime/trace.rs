//! Per-run execution records.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::graph::{NodeId, OpKind};

/// One executed node.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceEntry {
    pub node: NodeId,
    pub name: String,
    pub kind: OpKind,
    pub device: String,
    /// Simulated start time in microseconds since the session began.
    pub start: f64,
    pub end: f64,
    /// Bytes held by the executing device once this step finished.
    pub live_bytes: usize,
}

/// Nodes executed by one run, in schedule order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunTrace {
    pub entries: Vec<TraceEntry>,
}

impl RunTrace {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.entries.iter().any(|e| e.node == id)
    }

    pub fn entry(&self, id: NodeId) -> Option<&TraceEntry> {
        self.entries.iter().find(|e| e.node == id)
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.entries.iter().map(|e| e.node).collect()
    }

    /// Largest live-byte count seen on any device.
    pub fn peak_live_bytes(&self) -> usize {
        self.entries.iter().map(|e| e.live_bytes).max().unwrap_or(0)
    }

    pub fn peak_by_device(&self) -> BTreeMap<String, usize> {
        let mut out: BTreeMap<String, usize> = BTreeMap::new();
        for e in &self.entries {
            let slot = out.entry(e.device.clone()).or_default();
            *slot = (*slot).max(e.live_bytes);
        }
        out
    }

    /// Latest end time, or zero for an empty trace.
    pub fn makespan_end(&self) -> f64 {
        self.entries.iter().map(|e| e.end).fold(0.0, f64::max)
    }

    /// One JSON object per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("trace entries serialize"));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn peaks_and_jsonl() {
        let entry = |id, dev: &str, live| TraceEntry {
            node: NodeId(id),
            name: format!("n{id}"),
            kind: OpKind::Exp,
            device: dev.into(),
            start: id as f64,
            end: id as f64 + 1.0,
            live_bytes: live,
        };
        let t = RunTrace {
            entries: vec![entry(0, "a", 8), entry(1, "b", 32), entry(2, "a", 16)],
        };
        assert_eq!(t.peak_live_bytes(), 32);
        assert_eq!(t.peak_by_device()["a"], 16);
        assert_eq!(t.makespan_end(), 3.0);
        let text = t.to_jsonl();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with(r#"{"node":0,"name":"n0","kind":"Exp","device":"a","start":0.0"#));
    }
}
