//! Compilation of programs into dataflow graphs, and partitioning of those
//! graphs into distributed groups.

mod compile;
mod dot;
mod partition;
mod stats;

use std::fmt;

use thiserror::Error;

use crate::dsl::{DistPolicy, GatherPolicy};

pub use compile::{compile, compile_structure, NameKind, Resolve};
pub use dot::to_dot;
pub use partition::{partition, ChannelClass, DeploymentPlan, Endpoint, Manifest};
pub use stats::{channel_stats, predict_counts, ChannelStats};

pub type NodeId = u32;
pub type ChannelId = u32;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum NodeKind {
    /// Chained user stages. A `combiner` makes this a barrier node that first
    /// folds its data inputs with the named reducer.
    Logic {
        stages: Vec<String>,
        combiner: Option<String>,
    },
    Router { policy: DistPolicy },
    Spreader { function: String },
    /// `Gather` or `Gatherall`.
    Merger { policy: GatherPolicy },
    Reducer { function: String },
}

impl NodeKind {
    pub fn is_barrier(&self) -> bool {
        matches!(
            self,
            NodeKind::Reducer { .. }
                | NodeKind::Merger {
                    policy: GatherPolicy::Gatherall
                }
                | NodeKind::Logic {
                    combiner: Some(_),
                    ..
                }
        )
    }

    pub fn label(&self) -> String {
        match self {
            NodeKind::Logic { stages, combiner } => {
                let chain = stages.join("+");
                match combiner {
                    Some(c) => format!("{c}>{chain}"),
                    None => chain,
                }
            }
            NodeKind::Router { policy } => match policy {
                DistPolicy::Broadcast => "bcast".into(),
                DistPolicy::Scatter => "scatter".into(),
                DistPolicy::Unicast(sel) => format!("ucast:{sel:?}"),
            },
            NodeKind::Spreader { function } => format!("spread:{function}"),
            NodeKind::Merger { policy } => match policy {
                GatherPolicy::Gather => "gather".into(),
                GatherPolicy::Gatherall => "gatherall".into(),
                GatherPolicy::Reduce(f) => format!("reduce:{f}"),
            },
            NodeKind::Reducer { function } => format!("reduce:{function}"),
        }
    }
}

/// Round condition attached to the exit node of a feedback body.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Guard {
    pub cond: String,
    /// `None` loops until end of stream.
    pub rounds: Option<u32>,
}

impl Guard {
    pub fn continues(&self, round: u32) -> bool {
        self.rounds.map_or(true, |r| round < r)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct NodeSpec {
    pub id: NodeId,
    pub kind: NodeKind,
    /// Member path of the enclosing `dist` replicas, e.g. `W1` or `L0/C1`.
    pub home: Option<String>,
    pub replica: Option<u32>,
    pub guard: Option<Guard>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChannelRole {
    Data,
    /// External input into a feedback exit node.
    Entry,
    /// Feedback edge from an exit node back to a body entry.
    Loop,
    /// Output of a feedback exit node once its condition has fired.
    Exit,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Channel {
    pub id: ChannelId,
    pub src: NodeId,
    pub dst: NodeId,
    pub role: ChannelRole,
    /// Closes a cycle; the graph without these edges is acyclic.
    pub feedback: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DataflowGraph {
    pub nodes: Vec<NodeSpec>,
    pub channels: Vec<Channel>,
    /// Nodes without inputs.
    pub inputs: Vec<NodeId>,
    /// Nodes whose emissions are the program's results.
    pub outputs: Vec<NodeId>,
}

impl DataflowGraph {
    pub fn node(&self, id: NodeId) -> &NodeSpec {
        &self.nodes[id as usize]
    }

    pub fn channel(&self, id: ChannelId) -> &Channel {
        &self.channels[id as usize]
    }

    pub fn inputs_of(&self, id: NodeId) -> impl Iterator<Item = &Channel> {
        self.channels.iter().filter(move |c| c.dst == id)
    }

    pub fn outputs_of(&self, id: NodeId) -> impl Iterator<Item = &Channel> {
        self.channels.iter().filter(move |c| c.src == id)
    }

    /// Group assignment that places every node at its home member, and nodes
    /// outside any `dist` into `default_group`.
    pub fn assignment_by_home(&self, default_group: &str) -> Vec<(NodeId, String)> {
        self.nodes
            .iter()
            .map(|n| {
                let g = n
                    .home
                    .as_deref()
                    .map(|h| h.split('/').next().unwrap_or(h).to_string())
                    .unwrap_or_else(|| default_group.to_string());
                (n.id, g)
            })
            .collect()
    }

    /// Checks endpoint validity and that the non-feedback subgraph is acyclic.
    pub fn check(&self) -> Result<(), GraphError> {
        for c in &self.channels {
            for end in [c.src, c.dst] {
                if end as usize >= self.nodes.len() {
                    return Err(GraphError::DanglingChannel { channel: c.id, node: end });
                }
            }
        }
        let n = self.nodes.len();
        let mut indeg = vec![0usize; n];
        for c in self.channels.iter().filter(|c| !c.feedback) {
            indeg[c.dst as usize] += 1;
        }
        let mut ready: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
        let mut seen = 0;
        while let Some(i) = ready.pop() {
            seen += 1;
            for c in self.channels.iter().filter(|c| !c.feedback && c.src as usize == i) {
                indeg[c.dst as usize] -= 1;
                if indeg[c.dst as usize] == 0 {
                    ready.push(c.dst as usize);
                }
            }
        }
        if seen != n {
            return Err(GraphError::Cyclic);
        }
        Ok(())
    }
}

impl fmt::Display for DataflowGraph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for n in &self.nodes {
            write!(f, "n{} {}", n.id, n.kind.label())?;
            if let Some(h) = &n.home {
                write!(f, " @{h}")?;
            }
            if let Some(g) = &n.guard {
                write!(f, " [{}]", g.cond)?;
            }
            writeln!(f)?;
        }
        for c in &self.channels {
            writeln!(f, "c{} n{} -> n{} {:?}{}", c.id, c.src, c.dst, c.role, if c.feedback { " fb" } else { "" })?;
        }
        Ok(())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GraphError {
    #[error("arity: {message}")]
    Arity { message: String, path: Vec<usize> },
    #[error("undeclared {kind} `{name}`")]
    Undeclared { kind: &'static str, name: String },
    #[error("unbound {kind} `{name}`")]
    Unbound { kind: NameKind, name: String },
    #[error("channel {channel} references missing node {node}")]
    DanglingChannel { channel: ChannelId, node: NodeId },
    #[error("graph has a cycle outside feedback channels")]
    Cyclic,
    #[error("node {0} is not assigned to any dgroup")]
    Unassigned(NodeId),
    #[error("node {node} is assigned to both `{first}` and `{second}`")]
    AssignedTwice {
        node: NodeId,
        first: String,
        second: String,
    },
    #[error("node {0} does not exist")]
    UnknownNode(NodeId),
    #[error("dgroup `{0}` is not connected")]
    Disconnected(String),
    #[error("dgroup `{0}` has inter-dgroup channels but no endpoint")]
    MissingEndpoint(String),
    #[error("endpoint given for unknown dgroup `{0}`")]
    DanglingEndpoint(String),
    #[error("dgroup `{0}` is empty")]
    EmptyGroup(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("cannot predict message counts: {0}")]
    Unpredictable(String),
}
