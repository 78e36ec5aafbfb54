//! Graphviz export with name-scope grouping.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write;

use crate::graph::{Graph, Node, NodeId};

/// A drawn element: a single node, or a collapsed scope standing in for
/// every node below it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GroupKey {
    Node(NodeId),
    Scope(String),
}

impl GroupKey {
    fn dot_id(&self) -> String {
        match self {
            GroupKey::Node(id) => format!("n{id}"),
            GroupKey::Scope(path) => format!("scope:{path}"),
        }
    }
}

fn scopes(name: &str) -> Vec<&str> {
    let mut parts: Vec<&str> = name.split('/').collect();
    parts.pop();
    parts
}

/// Nodes nested deeper than `depth` scopes collapse into the scope made of
/// their first `depth + 1` segments.
fn key_of(node: &Node, depth: usize) -> GroupKey {
    let s = scopes(&node.name);
    if s.len() > depth {
        GroupKey::Scope(s[..=depth].join("/"))
    } else {
        GroupKey::Node(node.id)
    }
}

/// Scope path of the cluster that contains an element.
fn cluster_of(graph: &Graph, key: &GroupKey) -> Vec<String> {
    match key {
        GroupKey::Node(id) => scopes(&graph.expect_node(*id).name)
            .into_iter()
            .map(str::to_string)
            .collect(),
        GroupKey::Scope(path) => {
            let mut parts: Vec<String> = path.split('/').map(str::to_string).collect();
            parts.pop();
            parts
        }
    }
}

/// Edges between drawn elements, as the image of all data and control edges
/// under the grouping map, with self-loops inside a group dropped. The flag
/// is true when at least one underlying edge carries data.
pub fn quotient_edges(graph: &Graph, depth: usize) -> BTreeMap<(GroupKey, GroupKey), bool> {
    let mut out: BTreeMap<(GroupKey, GroupKey), bool> = BTreeMap::new();
    for node in graph.nodes() {
        let dst = key_of(node, depth);
        let data = node.inputs.iter().map(|t| (t.node, true));
        let control = node.control_inputs.iter().map(|&c| (c, false));
        for (src, is_data) in data.chain(control) {
            let src = key_of(graph.expect_node(src), depth);
            if src == dst {
                continue;
            }
            *out.entry((src, dst.clone())).or_insert(false) |= is_data;
        }
    }
    out
}

fn quote(s: &str) -> String {
    let mut q = String::with_capacity(s.len() + 2);
    q.push('"');
    for c in s.chars() {
        match c {
            '"' => q.push_str("\\\""),
            '\\' => q.push_str("\\\\"),
            '\n' => q.push_str("\\n"),
            c => q.push(c),
        }
    }
    q.push('"');
    q
}

#[derive(Default)]
struct Cluster {
    members: Vec<String>,
    children: BTreeMap<String, Cluster>,
}

impl Cluster {
    fn insert(&mut self, path: &[String], line: String) {
        match path.split_first() {
            None => self.members.push(line),
            Some((head, rest)) => self.children.entry(head.clone()).or_default().insert(rest, line),
        }
    }

    fn render(&self, out: &mut String, prefix: &str, indent: usize) {
        let pad = "  ".repeat(indent);
        for m in &self.members {
            let _ = writeln!(out, "{pad}{m}");
        }
        for (name, child) in &self.children {
            let path = if prefix.is_empty() {
                name.clone()
            } else {
                format!("{prefix}/{name}")
            };
            let _ = writeln!(out, "{pad}subgraph {} {{", quote(&format!("cluster_{path}")));
            let _ = writeln!(out, "{pad}  label={};", quote(name));
            child.render(out, &path, indent + 1);
            let _ = writeln!(out, "{pad}}}");
        }
    }
}

/// Deterministic DOT text for `graph`. Scopes up to `collapse_depth` levels
/// deep are drawn as clusters; anything deeper is folded into one box per
/// scope at level `collapse_depth + 1`.
pub fn export_dot(graph: &Graph, collapse_depth: usize) -> String {
    let mut keys: BTreeSet<GroupKey> = BTreeSet::new();
    let mut folded: BTreeMap<String, usize> = BTreeMap::new();
    for node in graph.nodes() {
        let key = key_of(node, collapse_depth);
        if let GroupKey::Scope(path) = &key {
            *folded.entry(path.clone()).or_default() += 1;
        }
        keys.insert(key);
    }

    let mut root = Cluster::default();
    for key in &keys {
        let line = match key {
            GroupKey::Node(id) => {
                let n = graph.expect_node(*id);
                let short = n.name.rsplit('/').next().unwrap_or(&n.name);
                format!(
                    "{} [label={}];",
                    quote(&key.dot_id()),
                    quote(&format!("{short}\n{}", n.kind))
                )
            }
            GroupKey::Scope(path) => {
                let short = path.rsplit('/').next().unwrap_or(path);
                format!(
                    "{} [label={}, shape=box3d];",
                    quote(&key.dot_id()),
                    quote(&format!("{short}\n{} nodes", folded[path]))
                )
            }
        };
        root.insert(&cluster_of(graph, key), line);
    }

    let mut out = String::from("digraph G {\n  node [shape=box];\n");
    root.render(&mut out, "", 1);
    for ((src, dst), data) in quotient_edges(graph, collapse_depth) {
        let style = if data { "" } else { " [style=dashed]" };
        let _ = writeln!(out, "  {} -> {}{style};", quote(&src.dot_id()), quote(&dst.dot_id()));
    }
    out.push_str("}\n");
    out
}
