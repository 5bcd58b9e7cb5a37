use std::collections::BTreeMap;
use std::fmt::Write;

use super::{ChannelRole, DataflowGraph, NodeKind};

/// Graphviz rendering; replicas are clustered by their top-level dist member.
pub fn to_dot(g: &DataflowGraph) -> String {
    let mut out = String::from("digraph dataflow {\n  rankdir=LR;\n  node [fontname=\"monospace\"];\n");
    let mut clusters: BTreeMap<&str, Vec<u32>> = BTreeMap::new();
    let mut free = Vec::new();
    for n in &g.nodes {
        match n.home.as_deref() {
            Some(h) => clusters.entry(h.split('/').next().unwrap_or(h)).or_default().push(n.id),
            None => free.push(n.id),
        }
    }
    let node_line = |out: &mut String, id: u32, indent: &str| {
        let n = g.node(id);
        let shape = match n.kind {
            NodeKind::Logic { .. } => "box",
            NodeKind::Router { .. } | NodeKind::Spreader { .. } => "triangle",
            NodeKind::Merger { .. } | NodeKind::Reducer { .. } => "invtriangle",
        };
        let mut label = format!("{}: {}", n.id, n.kind.label());
        if let Some(guard) = &n.guard {
            write!(label, "\\n[{}]", guard.cond).expect("write to string");
        }
        writeln!(out, "{indent}n{id} [shape={shape}, label=\"{label}\"];").expect("write to string");
    };
    for id in free {
        node_line(&mut out, id, "  ");
    }
    for (i, (name, ids)) in clusters.iter().enumerate() {
        writeln!(out, "  subgraph cluster_{i} {{\n    label=\"{name}\";").expect("write to string");
        for &id in ids {
            node_line(&mut out, id, "    ");
        }
        out.push_str("  }\n");
    }
    for c in &g.channels {
        let style = match (c.role, c.feedback) {
            (ChannelRole::Loop, _) | (_, true) => " [style=dashed, constraint=false]",
            (ChannelRole::Entry, _) => " [style=bold]",
            _ => "",
        };
        writeln!(out, "  n{} -> n{}{style};", c.src, c.dst).expect("write to string");
    }
    out.push_str("}\n");
    out
}
