use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{DataflowGraph, GraphError, NodeId};

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Endpoint {
    pub host: String,
    pub port: u16,
}

impl Endpoint {
    pub fn new(host: impl Into<String>, port: u16) -> Self {
        Endpoint {
            host: host.into(),
            port,
        }
    }

    pub fn address(&self) -> String {
        format!("{}:{}", self.host, self.port)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ChannelClass {
    Intra(String),
    Inter { from: String, to: String },
}

impl ChannelClass {
    pub fn is_inter(&self) -> bool {
        matches!(self, ChannelClass::Inter { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeploymentPlan {
    pub graph: DataflowGraph,
    pub dgroups: BTreeMap<String, BTreeSet<NodeId>>,
    pub endpoints: BTreeMap<String, Endpoint>,
    /// Indexed by channel id.
    pub classes: Vec<ChannelClass>,
}

impl DeploymentPlan {
    pub fn group_of(&self, node: NodeId) -> &str {
        self.dgroups
            .iter()
            .find(|(_, nodes)| nodes.contains(&node))
            .map(|(g, _)| g.as_str())
            .expect("plan covers every node")
    }

    pub fn inter_channels(&self) -> impl Iterator<Item = super::ChannelId> + '_ {
        self.classes
            .iter()
            .enumerate()
            .filter(|(_, c)| c.is_inter())
            .map(|(i, _)| i as super::ChannelId)
    }

    pub fn to_manifest(&self) -> String {
        let manifest = Manifest {
            dgroup: self
                .dgroups
                .iter()
                .map(|(name, nodes)| {
                    let ep = self.endpoints.get(name);
                    (
                        name.clone(),
                        ManifestGroup {
                            host: ep.map(|e| e.host.clone()),
                            port: ep.map(|e| e.port),
                            nodes: nodes.iter().copied().collect(),
                        },
                    )
                })
                .collect(),
        };
        toml::to_string(&manifest).expect("manifest serialises")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestGroup {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub host: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub port: Option<u16>,
    pub nodes: Vec<NodeId>,
}

/// The on-disk deployment manifest: one `[dgroup.NAME]` table per group.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Manifest {
    #[serde(default)]
    pub dgroup: BTreeMap<String, ManifestGroup>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Manifest, GraphError> {
        toml::from_str(text).map_err(|e| GraphError::Manifest(e.to_string()))
    }

    pub fn assignment(&self) -> Vec<(NodeId, String)> {
        self.dgroup
            .iter()
            .flat_map(|(g, m)| m.nodes.iter().map(move |&n| (n, g.clone())))
            .collect()
    }

    pub fn endpoints(&self) -> BTreeMap<String, Endpoint> {
        self.dgroup
            .iter()
            .filter_map(|(g, m)| match (&m.host, m.port) {
                (Some(h), Some(p)) => Some((g.clone(), Endpoint::new(h.clone(), p))),
                _ => None,
            })
            .collect()
    }

    pub fn plan(&self, g: &DataflowGraph) -> Result<DeploymentPlan, GraphError> {
        partition(g, &self.assignment(), &self.endpoints())
    }
}

/// Splits `g` into dgroups. Each group must be weakly connected; feedback
/// channels may cross groups.
pub fn partition(
    g: &DataflowGraph,
    assignment: &[(NodeId, String)],
    endpoints: &BTreeMap<String, Endpoint>,
) -> Result<DeploymentPlan, GraphError> {
    let mut owner: BTreeMap<NodeId, String> = BTreeMap::new();
    for (node, group) in assignment {
        if *node as usize >= g.nodes.len() {
            return Err(GraphError::UnknownNode(*node));
        }
        if let Some(first) = owner.insert(*node, group.clone()) {
            return Err(GraphError::AssignedTwice {
                node: *node,
                first,
                second: group.clone(),
            });
        }
    }
    let mut dgroups: BTreeMap<String, BTreeSet<NodeId>> = BTreeMap::new();
    for n in &g.nodes {
        let group = owner.get(&n.id).ok_or(GraphError::Unassigned(n.id))?;
        dgroups.entry(group.clone()).or_default().insert(n.id);
    }
    for name in endpoints.keys() {
        if !dgroups.contains_key(name) {
            return Err(GraphError::DanglingEndpoint(name.clone()));
        }
    }

    for (name, nodes) in &dgroups {
        let start = *nodes.iter().next().ok_or_else(|| GraphError::EmptyGroup(name.clone()))?;
        let mut seen = BTreeSet::from([start]);
        let mut stack = vec![start];
        while let Some(n) = stack.pop() {
            for c in &g.channels {
                let next = if c.src == n {
                    c.dst
                } else if c.dst == n {
                    c.src
                } else {
                    continue;
                };
                if nodes.contains(&next) && seen.insert(next) {
                    stack.push(next);
                }
            }
        }
        if seen.len() != nodes.len() {
            return Err(GraphError::Disconnected(name.clone()));
        }
    }

    let classes: Vec<ChannelClass> = g
        .channels
        .iter()
        .map(|c| {
            let (from, to) = (&owner[&c.src], &owner[&c.dst]);
            if from == to {
                ChannelClass::Intra(from.clone())
            } else {
                ChannelClass::Inter {
                    from: from.clone(),
                    to: to.clone(),
                }
            }
        })
        .collect();
    for class in &classes {
        if let ChannelClass::Inter { from, to } = class {
            for group in [from, to] {
                if !endpoints.contains_key(group) {
                    return Err(GraphError::MissingEndpoint(group.clone()));
                }
            }
        }
    }

    Ok(DeploymentPlan {
        graph: g.clone(),
        dgroups,
        endpoints: endpoints.clone(),
        classes,
    })
}
